//! Reward for one generated path: collision penalty against the latest scan,
//! progress of the path points toward the goal, and a smoothness penalty.

use crate::geometry::{local_to_world, point_segment_distance, LocalPath, Point2, Pose, WorldPath};
use crate::world::{beam_degree, LidarScan, MAX_RANGE};
use serde::{Deserialize, Serialize};

pub const COLLISION_PENALTY: f64 = -15.0;
/// Weight of the squared-deflection penalty.
pub const SMOOTHNESS_WEIGHT: f64 = 0.0005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_c: f64,
    pub r_n: f64,
    pub r_s: f64,
    pub total: f64,
    pub terminal: bool,
}

/// Obstacle points in the robot frame, one per beam that returned a hit.
pub fn scan_to_obstacle_points(scan: &LidarScan) -> Vec<Point2> {
    scan.ranges()
        .iter()
        .enumerate()
        .filter(|(_, d)| **d < MAX_RANGE)
        .map(|(k, d)| {
            let a = (beam_degree(k) as f64).to_radians();
            Point2::new(d * a.cos(), d * a.sin())
        })
        .collect()
}

/// Smallest distance from any obstacle point to the path polyline starting at
/// the robot; `None` without obstacle points.
pub fn path_clearance(path: &LocalPath, obstacles: &[Point2]) -> Option<f64> {
    let poly = path.local_polyline();
    obstacles
        .iter()
        .map(|&p| {
            poly.windows(2)
                .map(|w| point_segment_distance(p, w[0], w[1]))
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(f64::min)
}

pub fn collision_penalty(path: &LocalPath, scan: &LidarScan, robot_radius: f64) -> (f64, bool) {
    match path_clearance(path, &scan_to_obstacle_points(scan)) {
        Some(delta) if delta < robot_radius => (COLLISION_PENALTY, true),
        _ => (0.0, false),
    }
}

/// `sum_i (d - s_i) / i` with `d` the robot's goal distance and `s_i` that of
/// path point `i`.
pub fn progress_reward(path_world: &WorldPath, robot: &Pose, goal: Point2) -> f64 {
    let d = robot.position().distance(&goal);
    path_world
        .poses
        .iter()
        .enumerate()
        .map(|(i, q)| (d - q.position().distance(&goal)) / (i + 1) as f64)
        .sum()
}

pub fn smoothness_penalty(path: &LocalPath) -> f64 {
    -SMOOTHNESS_WEIGHT * path.alphas().map(|a| a * a).sum::<f64>()
}

pub fn total_reward(path: &LocalPath, robot: &Pose, scan: &LidarScan, goal: Point2, robot_radius: f64) -> RewardBreakdown {
    let (r_c, terminal) = collision_penalty(path, scan, robot_radius);
    let r_n = progress_reward(&local_to_world(robot, path), robot, goal);
    let r_s = smoothness_penalty(path);
    RewardBreakdown {
        r_c,
        r_n,
        r_s,
        total: r_c + r_n + r_s,
        terminal,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PathPoint;
    use crate::world::{beam_index, BEAMS};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn scan_with(hits: &[(i32, f64)]) -> LidarScan {
        let mut r = vec![MAX_RANGE; BEAMS];
        for &(deg, d) in hits {
            r[beam_index(deg)] = d;
        }
        LidarScan::new(r)
    }

    fn path(pts: &[(f64, f64)]) -> LocalPath {
        LocalPath::new(pts.iter().map(|&(r, a)| PathPoint::new(r, a).unwrap()).collect()).unwrap()
    }

    #[test]
    fn obstacle_points() {
        assert!(scan_to_obstacle_points(&LidarScan::open()).is_empty());
        let pts = scan_to_obstacle_points(&scan_with(&[(0, 1.0)]));
        assert_eq!(pts, vec![Point2::new(1.0, 0.0)]);
        let pts = scan_to_obstacle_points(&scan_with(&[(89, 2.0)]));
        let a = 89f64.to_radians();
        assert_abs_diff_eq!(pts[0].x, 2.0 * a.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(pts[0].y, 2.0 * a.sin(), epsilon = 1e-15);
    }

    #[test]
    fn collision_cases() {
        let p = path(&[(0.3, 0.0), (0.3, 0.0)]);
        assert_eq!(collision_penalty(&p, &LidarScan::open(), 0.15), (0.0, false));
        // Beam at 90 degrees is outside the scan, so put the point beside the
        // path with a beam that lands 0.05 m from the x axis.
        let deg = 5;
        let d = 0.05 / (deg as f64).to_radians().sin();
        assert_eq!(collision_penalty(&p, &scan_with(&[(deg, d)]), 0.15), (-15.0, true));
        // Directly ahead of the path end at exactly the radius.
        let end = scan_with(&[(0, 0.75)]);
        assert_eq!(collision_penalty(&p, &end, 0.15), (0.0, false));
        let end = scan_with(&[(0, 0.7499)]);
        assert_eq!(collision_penalty(&p, &end, 0.15), (-15.0, true));
    }

    #[test]
    fn first_segment_is_checked() {
        // The obstacle sits beside the origin-to-first-point segment only.
        let p = path(&[(1.0, 0.0), (1.0, PI / 2.0)]);
        let deg = 30;
        let r = 0.1 / (deg as f64).to_radians().sin();
        let (rc, term) = collision_penalty(&p, &scan_with(&[(deg, r)]), 0.15);
        assert!(term);
        assert_eq!(rc, -15.0);
    }

    #[test]
    fn progress_cases() {
        let robot = Pose::new(0.0, 0.0, 0.0);
        let goal = Point2::new(2.0, 0.0);
        let wp = |xs: &[f64]| WorldPath {
            poses: xs.iter().map(|&x| Pose::new(x, 0.0, 0.0)).collect(),
        };
        assert_eq!(progress_reward(&wp(&[0.0, 0.0]), &robot, goal), 0.0);
        assert_abs_diff_eq!(progress_reward(&wp(&[0.5, 1.0]), &robot, goal), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(progress_reward(&wp(&[-1.0]), &robot, goal), -1.0, epsilon = 1e-15);
    }

    #[test]
    fn smoothness_cases() {
        assert_eq!(smoothness_penalty(&path(&[(0.1, 0.0); 4])), 0.0);
        assert_abs_diff_eq!(smoothness_penalty(&path(&[(0.1, 0.1); 10])), -5e-5, epsilon = 1e-17);
        assert_abs_diff_eq!(smoothness_penalty(&path(&[(0.1, PI)])), -0.0005 * PI * PI, epsilon = 1e-17);
    }

    #[test]
    fn stationary_path_scores_zero() {
        let p = path(&[(0.0, 0.0); 3]);
        let r = total_reward(&p, &Pose::new(-2.0, -2.0, 0.0), &LidarScan::open(), Point2::new(2.0, 2.0), 0.15);
        assert_eq!(
            r,
            RewardBreakdown {
                r_c: 0.0,
                r_n: 0.0,
                r_s: 0.0,
                total: 0.0,
                terminal: false
            }
        );
    }

    #[test]
    fn colliding_path_is_terminal() {
        let p = path(&[(0.3, 0.2), (0.3, -0.1)]);
        let r = total_reward(&p, &Pose::new(0.0, 0.0, 1.0), &scan_with(&[(0, 0.2)]), Point2::new(3.0, 3.0), 0.15);
        assert!(r.terminal);
        assert_eq!(r.r_c, -15.0);
        assert!(r.total <= -15.0 + r.r_n + r.r_s);
    }

    fn arb_path() -> impl Strategy<Value = LocalPath> {
        prop::collection::vec((0.0..0.4f64, -1.2..1.2f64), 1..12).prop_map(|v| path(&v))
    }

    fn arb_scan() -> impl Strategy<Value = LidarScan> {
        prop::collection::vec(prop_oneof![Just(MAX_RANGE), 0.05..3.4f64], BEAMS).prop_map(LidarScan::new)
    }

    proptest! {
        #[test]
        fn total_is_sum_of_parts(p in arb_path(), s in arb_scan(), x in -2.0..2.0f64, y in -2.0..2.0f64,
                                 th in -3.0..3.0f64, gx in -3.0..3.0f64, gy in -3.0..3.0f64) {
            let robot = Pose::new(x, y, th);
            let goal = Point2::new(gx, gy);
            let r = total_reward(&p, &robot, &s, goal, 0.15);
            let (rc, term) = collision_penalty(&p, &s, 0.15);
            let rn = progress_reward(&local_to_world(&robot, &p), &robot, goal);
            let rs = smoothness_penalty(&p);
            prop_assert_eq!(r.total, rc + rn + rs);
            prop_assert_eq!(r.terminal, term);
            prop_assert_eq!(r.terminal, r.r_c == -15.0);
            prop_assert!(r.r_s <= 0.0);
            prop_assert_eq!(r.r_s == 0.0, p.alphas().all(|a| a == 0.0));
        }

        #[test]
        fn smaller_radius_never_adds_collisions(p in arb_path(), s in arb_scan(), r1 in 0.01..0.5f64, f in 0.0..1.0f64) {
            let r0 = r1 * f;
            if !collision_penalty(&p, &s, r1).1 {
                prop_assert!(!collision_penalty(&p, &s, r0).1);
            }
        }

        #[test]
        fn progress_positive_when_all_points_closer(p in arb_path(), gx in 1.0..4.0f64) {
            let robot = Pose::new(0.0, 0.0, 0.0);
            let goal = Point2::new(gx, 0.0);
            let wp = local_to_world(&robot, &p);
            let d = gx;
            if wp.poses.iter().all(|q| q.position().distance(&goal) < d) {
                prop_assert!(progress_reward(&wp, &robot, goal) > 0.0);
            }
        }
    }
}
