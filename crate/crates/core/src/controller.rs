//! Motion fine-tuning: pick an execution bearing near the first path point
//! that keeps away from close obstacles, then turn it into a velocity command.

use crate::geometry::PathPoint;
use crate::world::{Command, LidarScan, BEAMS, FIRST_BEAM_DEG, MAX_RANGE};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    /// Weight of the obstacle term.
    pub alpha_w: f64,
    /// Weight of the squared deviation from the path bearing.
    pub beta_w: f64,
    /// Half width of the obstacle window, in beams.
    pub window: i32,
    /// Candidate bearings are `search_min..search_max` degrees.
    pub search_min: i32,
    pub search_max: i32,
    /// Half angle of the sector that must be clear, in degrees.
    pub safe_half_sector: i32,
    pub emergency_dist: f64,
    pub rotate_step: i32,
    pub v_max: f64,
    pub omega_max: f64,
    pub k_ang: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            alpha_w: 0.3,
            beta_w: 1.0,
            window: 5,
            search_min: -85,
            search_max: 85,
            safe_half_sector: 5,
            emergency_dist: 0.5,
            rotate_step: 5,
            v_max: 0.1,
            omega_max: 0.5,
            k_ang: 2.0,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<(), String> {
        let last = FIRST_BEAM_DEG + BEAMS as i32 - 1;
        if self.search_min >= self.search_max {
            return Err("empty bearing search range".into());
        }
        if self.search_min - self.window < FIRST_BEAM_DEG || self.search_max - 1 + self.window > last {
            return Err("obstacle window leaves the scan".into());
        }
        if self.window < 0 || self.safe_half_sector < 0 || self.rotate_step <= 0 {
            return Err("window sizes must be non-negative and the rotation step positive".into());
        }
        if !(self.v_max > 0.0 && self.omega_max > 0.0 && self.emergency_dist >= 0.0) {
            return Err("speed limits must be positive".into());
        }
        Ok(())
    }
}

/// Execution direction chosen by the fine-tuner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bearing {
    /// Drive toward this many degrees left of the heading.
    Heading(i32),
    /// No clear sector: turn on the spot, `+1.0` counter-clockwise.
    RotateInPlace(f64),
}

/// Bearing of the first path point, in radians.
pub fn first_point_bearing(p: &PathPoint) -> f64 {
    let (y, x) = p.alpha().sin_cos();
    y.atan2(x)
}

/// Cost of driving toward candidate `i` degrees.
pub fn fine_tune_cost(scan: &LidarScan, i: i32, target: f64, cfg: &FineTuneConfig) -> f64 {
    let obstacle: f64 = (i - cfg.window..=i + cfg.window)
        .map(|j| {
            let d = scan.at_degree(j) - MAX_RANGE;
            d * d
        })
        .sum();
    let psi = ((i as f64).to_radians() - target).abs();
    cfg.alpha_w * obstacle + cfg.beta_w * psi * psi
}

/// Integer degree minimizing the cost; ties go to the smaller `|i|`, then the
/// smaller `i`.
pub fn fine_tune_direction(scan: &LidarScan, target: f64, cfg: &FineTuneConfig) -> i32 {
    let mut best = cfg.search_min;
    let mut best_cost = f64::INFINITY;
    for i in cfg.search_min..cfg.search_max {
        let c = fine_tune_cost(scan, i, target, cfg);
        let better = c < best_cost || (c == best_cost && (i.abs(), i) < (best.abs(), best));
        if better {
            best = i;
            best_cost = c;
        }
    }
    best
}

fn sector(scan: &LidarScan, b: i32, cfg: &FineTuneConfig) -> (f64, i32) {
    let last = FIRST_BEAM_DEG + BEAMS as i32 - 1;
    let lo = (b - cfg.safe_half_sector).max(FIRST_BEAM_DEG);
    let hi = (b + cfg.safe_half_sector).min(last);
    (lo..=hi)
        .map(|j| (scan.at_degree(j), j))
        .fold((f64::INFINITY, b), |acc, x| if x.0 < acc.0 { x } else { acc })
}

pub fn sector_clear(scan: &LidarScan, b: i32, cfg: &FineTuneConfig) -> bool {
    sector(scan, b, cfg).0 >= cfg.emergency_dist
}

/// Moves `bearing` in rotation steps away from the nearest close obstacle of
/// its safe sector until the sector is clear.
pub fn emergency_adjust(scan: &LidarScan, bearing: i32, cfg: &FineTuneConfig) -> Bearing {
    let (near, j) = sector(scan, bearing, cfg);
    if near >= cfg.emergency_dist {
        return Bearing::Heading(bearing);
    }
    let away = if j > bearing {
        -1
    } else if j < bearing {
        1
    } else {
        let side = |r: std::ops::RangeInclusive<i32>| r.map(|k| scan.at_degree(k)).sum::<f64>();
        if side(FIRST_BEAM_DEG..=-1) > side(1..=FIRST_BEAM_DEG + BEAMS as i32 - 1) {
            -1
        } else {
            1
        }
    };
    for dir in [away, -away] {
        let mut b = bearing + dir * cfg.rotate_step;
        while b >= cfg.search_min && b < cfg.search_max {
            if sector_clear(scan, b, cfg) {
                return Bearing::Heading(b);
            }
            b += dir * cfg.rotate_step;
        }
    }
    Bearing::RotateInPlace(away as f64)
}

pub fn command_from_bearing(bearing: Bearing, dist_to_goal: f64, cfg: &FineTuneConfig) -> Command {
    match bearing {
        Bearing::Heading(deg) => command_toward((deg as f64).to_radians(), dist_to_goal, cfg),
        Bearing::RotateInPlace(s) => Command::new(0.0, s.signum() * cfg.omega_max),
    }
}

/// Velocity law for a continuous bearing in radians: turn rate proportional
/// to the bearing, forward speed fading to zero at a right angle.
pub fn command_toward(bearing: f64, dist_to_goal: f64, cfg: &FineTuneConfig) -> Command {
    let omega = (cfg.k_ang * bearing).clamp(-cfg.omega_max, cfg.omega_max);
    let slow = (1.0 - bearing.abs() / std::f64::consts::FRAC_PI_2).max(0.0);
    Command::new(dist_to_goal.clamp(0.0, cfg.v_max) * slow, omega)
}

/// Full fine-tuning chain from the latest scan and the first path point.
pub fn fine_tune(scan: &LidarScan, first: &PathPoint, dist_to_goal: f64, cfg: &FineTuneConfig) -> (Bearing, Command) {
    let i = fine_tune_direction(scan, first_point_bearing(first), cfg);
    let b = emergency_adjust(scan, i, cfg);
    (b, command_from_bearing(b, dist_to_goal, cfg))
}
