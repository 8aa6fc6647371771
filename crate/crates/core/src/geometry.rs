//! Poses, relative polar paths and the frame transforms between them.
//!
//! A path is a chain of [`PathPoint`]s, each one a displacement `rho` along a
//! heading that has been deflected by `alpha` relative to the previous point.
//! Headings accumulate along the chain, so point `i` is reached along
//! `base.theta + alpha_1 + ... + alpha_i`.

use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("path point rho must be finite and nonnegative, got {0}")]
    InvalidRho(f64),
    #[error("path point alpha must lie in [-pi, pi], got {0}")]
    InvalidAlpha(f64),
    #[error("a path needs at least one point")]
    EmptyPath,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(angle: f64) -> f64 {
    let wrapped = angle.rem_euclid(TAU);
    if wrapped > PI {
        wrapped - TAU
    } else {
        wrapped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

impl From<(f64, f64)> for Point2 {
    fn from((x, y): (f64, f64)) -> Self {
        Self { x, y }
    }
}

/// World pose of the robot (or of a path point expressed in the world frame).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    /// Heading in `(-pi, pi]`.
    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn set_theta(&mut self, theta: f64) {
        self.theta = normalize_angle(theta);
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    /// Expresses a world point in this pose's Cartesian frame (x forward, y left).
    pub fn to_local(&self, p: Point2) -> Point2 {
        let (s, c) = self.theta.sin_cos();
        let dx = p.x - self.x;
        let dy = p.y - self.y;
        Point2::new(dx * c + dy * s, -dx * s + dy * c)
    }

    /// Inverse of [`Pose::to_local`].
    pub fn to_world(&self, p: Point2) -> Point2 {
        let (s, c) = self.theta.sin_cos();
        Point2::new(self.x + p.x * c - p.y * s, self.y + p.x * s + p.y * c)
    }
}

/// One step of a local path: travel `rho` after turning by `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PathPoint {
    rho: f64,
    alpha: f64,
}

impl PathPoint {
    /// The robot's own location, the seed of every generated chain.
    pub const ORIGIN: PathPoint = PathPoint {
        rho: 0.0,
        alpha: 0.0,
    };

    pub fn new(rho: f64, alpha: f64) -> Result<Self, GeometryError> {
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(GeometryError::InvalidRho(rho));
        }
        if !(alpha.is_finite() && (-PI..=PI).contains(&alpha)) {
            return Err(GeometryError::InvalidAlpha(alpha));
        }
        Ok(Self { rho, alpha })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalPath {
    points: Vec<PathPoint>,
}

impl LocalPath {
    pub fn new(points: Vec<PathPoint>) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyPath);
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[PathPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first(&self) -> PathPoint {
        self.points[0]
    }

    pub fn alphas(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(PathPoint::alpha)
    }

    /// Cartesian vertices in the robot frame, starting at the origin.
    pub fn local_polyline(&self) -> Vec<Point2> {
        let mut out = Vec::with_capacity(self.points.len() + 1);
        let mut cur = Point2::ORIGIN;
        out.push(cur);
        for (p, heading) in self.points.iter().zip(accumulate_headings(self)) {
            cur = Point2::new(
                cur.x + p.rho * heading.cos(),
                cur.y + p.rho * heading.sin(),
            );
            out.push(cur);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldPath {
    pub poses: Vec<Pose>,
}

/// Goal in the robot's polar frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GoalLocal {
    pub rho_g: f64,
    pub theta_g: f64,
}

/// Prefix sums of the deflections; not wrapped.
pub fn accumulate_headings(path: &LocalPath) -> Vec<f64> {
    path.points
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p.alpha;
            Some(*acc)
        })
        .collect()
}

pub fn local_to_world(base: &Pose, path: &LocalPath) -> WorldPath {
    let mut x = base.x;
    let mut y = base.y;
    let poses = accumulate_headings(path)
        .into_iter()
        .zip(&path.points)
        .map(|(heading, p)| {
            let theta = normalize_angle(base.theta + heading);
            x += p.rho * theta.cos();
            y += p.rho * theta.sin();
            Pose { x, y, theta }
        })
        .collect();
    WorldPath { poses }
}

/// Recovers the relative polar chain from a world path. Inverse of
/// [`local_to_world`] for the same base pose.
pub fn world_to_local(base: &Pose, world: &WorldPath) -> Result<LocalPath, GeometryError> {
    let mut prev = *base;
    let mut points = Vec::with_capacity(world.poses.len());
    for pose in &world.poses {
        let rho = prev.position().distance(&pose.position());
        let alpha = normalize_angle(pose.theta - prev.theta);
        points.push(PathPoint::new(rho, alpha)?);
        prev = *pose;
    }
    LocalPath::new(points)
}

pub fn world_goal_to_local(robot: &Pose, goal_world: Point2) -> GoalLocal {
    let local = robot.to_local(goal_world);
    let rho_g = local.norm();
    if rho_g == 0.0 {
        return GoalLocal::default();
    }
    GoalLocal {
        rho_g,
        theta_g: local.y.atan2(local.x),
    }
}

/// Distance from `p` to the closed segment `[a, b]`.
pub fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let abx = b.x - a.x;
    let aby = b.y - a.y;
    let len2 = abx * abx + aby * aby;
    if len2 == 0.0 {
        return p.distance(&a);
    }
    let t = (((p.x - a.x) * abx + (p.y - a.y) * aby) / len2).clamp(0.0, 1.0);
    let foot = Point2::new(a.x + t * abx, a.y + t * aby);
    p.distance(&foot)
}
