//! Artificial potential field planner driven by the same lidar scan.

use crate::controller::{command_toward, FineTuneConfig};
use crate::geometry::{world_goal_to_local, Point2, Pose};
use crate::reward::scan_to_obstacle_points;
use crate::world::{Command, LidarScan, MAX_RANGE};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApfConfig {
    pub k_att: f64,
    pub k_rep: f64,
    /// Obstacle points at or beyond this distance exert no force.
    pub d0: f64,
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for ApfConfig {
    fn default() -> Self {
        Self {
            k_att: 1.0,
            k_rep: 0.05,
            d0: 1.0,
            v_max: 0.1,
            omega_max: 0.5,
        }
    }
}

impl ApfConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.k_att > 0.0 && self.k_rep > 0.0 && self.d0 > 0.0) {
            return Err("potential field gains must be positive".into());
        }
        if self.d0 > MAX_RANGE {
            return Err(format!("repulsion cutoff {} exceeds the sensor range", self.d0));
        }
        if !(self.v_max > 0.0 && self.omega_max > 0.0) {
            return Err("speed limits must be positive".into());
        }
        Ok(())
    }

    fn law(&self) -> FineTuneConfig {
        FineTuneConfig {
            v_max: self.v_max,
            omega_max: self.omega_max,
            ..FineTuneConfig::default()
        }
    }
}

/// Repulsive push of one obstacle point in the robot frame.
pub fn repulsion(p: Point2, cfg: &ApfConfig) -> Point2 {
    let d = p.norm();
    if d >= cfg.d0 || d == 0.0 {
        return Point2::ORIGIN;
    }
    let mag = cfg.k_rep * (1.0 / d - 1.0 / cfg.d0) / (d * d);
    Point2::new(-mag * p.x / d, -mag * p.y / d)
}

/// Summed attractive and repulsive force in the robot frame.
pub fn apf_resultant(scan: &LidarScan, robot: &Pose, goal: Point2, cfg: &ApfConfig) -> Point2 {
    let g = world_goal_to_local(robot, goal);
    let (s, c) = g.theta_g.sin_cos();
    let mut f = Point2::new(cfg.k_att * c, cfg.k_att * s);
    for p in scan_to_obstacle_points(scan) {
        let r = repulsion(p, cfg);
        f.x += r.x;
        f.y += r.y;
    }
    f
}

pub fn apf_command(scan: &LidarScan, robot: &Pose, goal: Point2, cfg: &ApfConfig) -> Command {
    command_from_force(apf_resultant(scan, robot, goal, cfg), robot, goal, cfg)
}

/// Steers along `force`; a vanishing force turns the robot on the spot
/// toward the goal.
pub fn command_from_force(force: Point2, robot: &Pose, goal: Point2, cfg: &ApfConfig) -> Command {
    if force.norm() < 1e-12 {
        let g = world_goal_to_local(robot, goal);
        let turn = if g.theta_g < 0.0 { -1.0 } else { 1.0 };
        return Command::new(0.0, turn * cfg.omega_max);
    }
    let dist = robot.position().distance(&goal);
    command_toward(force.y.atan2(force.x), dist, &cfg.law())
}
