//! Planar simulator: obstacle maps, a 180-beam lidar, unicycle kinematics and
//! the episode lifecycle.

use crate::geometry::{point_segment_distance, world_goal_to_local, GoalLocal, PathPoint, Point2, Pose};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt;
use std::io;
use std::path::Path;
use thiserror::Error;

pub const MAX_RANGE: f64 = 3.5;
pub const BEAMS: usize = 180;
/// Angle in degrees of beam index 0.
pub const FIRST_BEAM_DEG: i32 = -90;
pub const FRAMES: usize = 3;
const MIN_RANGE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed map file {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("invalid map {name}: {reason}")]
    InvalidMap { name: String, reason: String },
    #[error("invalid episode config: {0}")]
    InvalidConfig(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            x0: x0.min(x1),
            y0: y0.min(y1),
            x1: x0.max(x1),
            y1: y0.max(y1),
        }
    }

    pub fn contains(&self, p: Point2) -> bool {
        (self.x0..=self.x1).contains(&p.x) && (self.y0..=self.y1).contains(&p.y)
    }

    /// Zero inside the rectangle.
    pub fn distance(&self, p: Point2) -> f64 {
        let dx = (self.x0 - p.x).max(p.x - self.x1).max(0.0);
        let dy = (self.y0 - p.y).max(p.y - self.y1).max(0.0);
        dx.hypot(dy)
    }

    pub fn edges(&self) -> [Segment; 4] {
        let a = Point2::new(self.x0, self.y0);
        let b = Point2::new(self.x1, self.y0);
        let c = Point2::new(self.x1, self.y1);
        let d = Point2::new(self.x0, self.y1);
        [
            Segment::new(a, b),
            Segment::new(b, c),
            Segment::new(c, d),
            Segment::new(d, a),
        ]
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: Point2,
    pub b: Point2,
}

impl Segment {
    pub fn new(a: Point2, b: Point2) -> Self {
        Self { a, b }
    }

    pub fn distance(&self, p: Point2) -> f64 {
        point_segment_distance(p, self.a, self.b)
    }

    /// Ray parameter of the first hit along the unit direction `dir`, if any.
    fn ray_hit(&self, origin: Point2, dir: (f64, f64)) -> Option<f64> {
        let ex = self.b.x - self.a.x;
        let ey = self.b.y - self.a.y;
        let denom = dir.0 * ey - dir.1 * ex;
        if denom.abs() < 1e-12 {
            return None;
        }
        let wx = self.a.x - origin.x;
        let wy = self.a.y - origin.y;
        let t = (wx * ey - wy * ex) / denom;
        let u = (wx * dir.1 - wy * dir.0) / denom;
        (t >= 0.0 && (0.0..=1.0).contains(&u)).then_some(t)
    }
}

/// Obstacle map with a start pose and a goal.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSpec {
    pub name: String,
    pub bounds: Rect,
    pub rects: Vec<Rect>,
    pub segments: Vec<Segment>,
    pub start: Pose,
    pub goal: Point2,
}

/// On-disk JSON layout of a map.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MapFile {
    name: String,
    bounds: [f64; 4],
    #[serde(default)]
    rects: Vec<[f64; 4]>,
    #[serde(default)]
    segments: Vec<[f64; 4]>,
    start: [f64; 3],
    goal: [f64; 2],
}

impl From<MapFile> for MapSpec {
    fn from(f: MapFile) -> Self {
        let rect = |r: [f64; 4]| Rect::new(r[0], r[1], r[2], r[3]);
        MapSpec {
            name: f.name,
            bounds: rect(f.bounds),
            rects: f.rects.into_iter().map(rect).collect(),
            segments: f
                .segments
                .into_iter()
                .map(|s| Segment::new(Point2::new(s[0], s[1]), Point2::new(s[2], s[3])))
                .collect(),
            start: Pose::new(f.start[0], f.start[1], f.start[2]),
            goal: Point2::new(f.goal[0], f.goal[1]),
        }
    }
}

impl From<&MapSpec> for MapFile {
    fn from(m: &MapSpec) -> Self {
        let rect = |r: &Rect| [r.x0, r.y0, r.x1, r.y1];
        MapFile {
            name: m.name.clone(),
            bounds: rect(&m.bounds),
            rects: m.rects.iter().map(rect).collect(),
            segments: m.segments.iter().map(|s| [s.a.x, s.a.y, s.b.x, s.b.y]).collect(),
            start: [m.start.x, m.start.y, m.start.theta()],
            goal: [m.goal.x, m.goal.y],
        }
    }
}

impl MapSpec {
    /// An obstacle-free 6 m square, start and goal on the diagonal.
    pub fn empty(name: &str) -> Self {
        MapSpec {
            name: name.to_owned(),
            bounds: Rect::new(-3.0, -3.0, 3.0, 3.0),
            rects: vec![],
            segments: vec![],
            start: Pose::new(-2.0, -2.0, 0.0),
            goal: Point2::new(2.0, 2.0),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str::<MapFile>(text).map(Into::into)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&MapFile::from(self)).expect("map serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WorldError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| WorldError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text).map_err(|source| WorldError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    /// Loads every `*.json` in a directory, sorted by file name.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<Self>, WorldError> {
        let dir = dir.as_ref();
        let io_err = |source| WorldError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths.iter().map(Self::load).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WorldError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|source| WorldError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Every ray-blocking edge: the four boundary walls, rectangle sides and
    /// free segments.
    pub fn edges(&self) -> Vec<Segment> {
        let mut out = Vec::with_capacity(4 + 4 * self.rects.len() + self.segments.len());
        out.extend(self.bounds.edges());
        for r in &self.rects {
            out.extend(r.edges());
        }
        out.extend(self.segments.iter().copied());
        out
    }

    /// Distance from `p` to the nearest obstacle or wall; zero inside an
    /// obstacle or outside the bounds.
    pub fn clearance(&self, p: Point2) -> f64 {
        let b = &self.bounds;
        if !b.contains(p) {
            return 0.0;
        }
        let walls = (p.x - b.x0).min(b.x1 - p.x).min(p.y - b.y0).min(b.y1 - p.y);
        let rects = self.rects.iter().map(|r| r.distance(p));
        let segs = self.segments.iter().map(|s| s.distance(p));
        rects.chain(segs).fold(walls, f64::min)
    }

    pub fn validate(&self, robot_radius: f64) -> Result<(), WorldError> {
        let invalid = |reason: String| WorldError::InvalidMap {
            name: self.name.clone(),
            reason,
        };
        let b = &self.bounds;
        if !(b.width() > 0.0 && b.height() > 0.0) {
            return Err(invalid("bounds have zero area".into()));
        }
        for (label, p) in [("start", self.start.position()), ("goal", self.goal)] {
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Err(invalid(format!("{label} is not finite")));
            }
            if !b.contains(p) {
                return Err(invalid(format!("{label} ({}, {}) lies outside bounds", p.x, p.y)));
            }
            let c = self.clearance(p);
            if c <= robot_radius {
                return Err(invalid(format!(
                    "{label} ({}, {}) has clearance {c:.3} m, need more than {robot_radius} m",
                    p.x, p.y
                )));
            }
        }
        Ok(())
    }
}

/// One lidar frame. Beam `k` points at `FIRST_BEAM_DEG + k` degrees from the
/// robot heading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarScan {
    ranges: Vec<f64>,
}

impl LidarScan {
    pub fn new(ranges: Vec<f64>) -> Self {
        assert_eq!(ranges.len(), BEAMS, "a scan has exactly {BEAMS} beams");
        let ranges = ranges.into_iter().map(|r| r.clamp(MIN_RANGE, MAX_RANGE)).collect();
        Self { ranges }
    }

    /// No returns on any beam.
    pub fn open() -> Self {
        Self {
            ranges: vec![MAX_RANGE; BEAMS],
        }
    }

    pub fn ranges(&self) -> &[f64] {
        &self.ranges
    }

    /// Range of the beam at `deg` degrees; `deg` must lie in [-90, 90).
    pub fn at_degree(&self, deg: i32) -> f64 {
        self.ranges[beam_index(deg)]
    }

    pub fn min_range(&self) -> f64 {
        self.ranges.iter().copied().fold(MAX_RANGE, f64::min)
    }
}

pub fn beam_index(deg: i32) -> usize {
    usize::try_from(deg - FIRST_BEAM_DEG).expect("beam angle below -90")
}

pub fn beam_degree(index: usize) -> i32 {
    FIRST_BEAM_DEG + index as i32
}

pub fn raycast_scan(map: &MapSpec, pose: &Pose) -> LidarScan {
    raycast_edges(&map.edges(), pose)
}

/// Casts the 180 beams against a precomputed edge list.
pub fn raycast_edges(edges: &[Segment], pose: &Pose) -> LidarScan {
    let origin = pose.position();
    let ranges = (0..BEAMS)
        .map(|k| {
            let heading = pose.theta() + f64::from(beam_degree(k)).to_radians();
            let dir = (heading.cos(), heading.sin());
            edges
                .iter()
                .filter_map(|e| e.ray_hit(origin, dir))
                .fold(MAX_RANGE, f64::min)
        })
        .collect();
    LidarScan::new(ranges)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub v: f64,
    pub omega: f64,
}

impl Command {
    pub const STOP: Command = Command { v: 0.0, omega: 0.0 };

    pub fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityLimits {
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for VelocityLimits {
    fn default() -> Self {
        Self {
            v_max: 0.1,
            omega_max: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotState {
    pub pose: Pose,
    pub v: f64,
    pub omega: f64,
    pub elapsed: f64,
    pub steps: u64,
}

impl RobotState {
    pub fn at(pose: Pose) -> Self {
        Self {
            pose,
            ..Default::default()
        }
    }
}

/// Advances the unicycle by one step with exact arc integration. The command
/// is clamped to `limits`. Returns the new state and the chord length covered.
pub fn step_kinematics(
    state: &RobotState,
    cmd: Command,
    dt: f64,
    limits: &VelocityLimits,
) -> (RobotState, f64) {
    let v = cmd.v.clamp(-limits.v_max, limits.v_max);
    let omega = cmd.omega.clamp(-limits.omega_max, limits.omega_max);
    let th = state.pose.theta();
    let mut pose = state.pose;
    let turn = omega * dt;
    let chord;
    if omega.abs() < 1e-9 {
        pose.x += v * dt * th.cos();
        pose.y += v * dt * th.sin();
        chord = v.abs() * dt;
    } else {
        let r = v / omega;
        pose.x += r * ((th + turn).sin() - th.sin());
        pose.y -= r * ((th + turn).cos() - th.cos());
        let half = 0.5 * turn;
        chord = v.abs() * dt * (half.sin() / half).abs();
    }
    pose.set_theta(th + turn);
    let steps = state.steps + 1;
    let next = RobotState {
        pose,
        v,
        omega,
        elapsed: steps as f64 * dt,
        steps,
    };
    (next, chord)
}

/// True when the robot disc of `robot_radius` overlaps an obstacle or wall.
pub fn check_collision(map: &MapSpec, pose: &Pose, robot_radius: f64) -> bool {
    map.clearance(pose.position()) < robot_radius
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeStatus {
    Running,
    Success,
    Collision,
    Timeout,
}

impl EpisodeStatus {
    pub fn is_terminal(self) -> bool {
        self != EpisodeStatus::Running
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EpisodeStatus::Running => "running",
            EpisodeStatus::Success => "success",
            EpisodeStatus::Collision => "collision",
            EpisodeStatus::Timeout => "timeout",
        }
    }
}

impl fmt::Display for EpisodeStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub dt: f64,
    pub robot_radius: f64,
    pub goal_radius: f64,
    pub timeout: f64,
    pub rng_seed: u64,
    pub limits: VelocityLimits,
    /// Standard deviation of additive range noise; zero disables noise.
    pub lidar_noise_std: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            robot_radius: 0.15,
            goal_radius: 0.2,
            timeout: 300.0,
            rng_seed: 0,
            limits: VelocityLimits::default(),
            lidar_noise_std: 0.0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: &str| Err(WorldError::InvalidConfig(m.to_owned()));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.robot_radius > 0.0) {
            return bad("robot_radius must be positive");
        }
        if !(self.goal_radius >= 0.5 * self.robot_radius) {
            return bad("goal_radius must be at least half the robot radius");
        }
        if !(self.timeout > 0.0) {
            return bad("timeout must be positive");
        }
        if !(self.lidar_noise_std >= 0.0) {
            return bad("lidar_noise_std must be nonnegative");
        }
        Ok(())
    }
}

pub fn episode_status(
    state: &RobotState,
    map: &MapSpec,
    goal: Point2,
    cfg: &EpisodeConfig,
) -> EpisodeStatus {
    if check_collision(map, &state.pose, cfg.robot_radius) {
        EpisodeStatus::Collision
    } else if state.pose.position().distance(&goal) < cfg.goal_radius {
        EpisodeStatus::Success
    } else if state.elapsed >= cfg.timeout {
        EpisodeStatus::Timeout
    } else {
        EpisodeStatus::Running
    }
}

/// Three lidar frames (oldest first), the goal in the robot frame and the
/// previous path point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationStack {
    pub frames: [LidarScan; FRAMES],
    pub goal: GoalLocal,
    pub prev_point: PathPoint,
}

impl ObservationStack {
    pub fn latest(&self) -> &LidarScan {
        &self.frames[FRAMES - 1]
    }

    /// Ranges of all frames divided by the sensor range, frame-major.
    pub fn normalized_frames(&self) -> Vec<f64> {
        self.frames
            .iter()
            .flat_map(|f| f.ranges.iter().map(|r| r / MAX_RANGE))
            .collect()
    }
}

/// `history` holds at least three frames, oldest first; the last three are used.
pub fn build_observation(
    history: &[LidarScan],
    robot: &Pose,
    goal_world: Point2,
    prev: PathPoint,
) -> ObservationStack {
    assert!(history.len() >= FRAMES, "need {FRAMES} lidar frames");
    let tail = &history[history.len() - FRAMES..];
    ObservationStack {
        frames: [tail[0].clone(), tail[1].clone(), tail[2].clone()],
        goal: world_goal_to_local(robot, goal_world),
        prev_point: prev,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub omega: f64,
    pub status: EpisodeStatus,
}

pub fn write_trajectory_csv<W: io::Write>(out: W, samples: &[TrajectorySample]) -> Result<(), WorldError> {
    let mut w = csv::Writer::from_writer(out);
    for s in samples {
        w.serialize(s)?;
    }
    w.flush().map_err(|source| WorldError::Io {
        path: "<trajectory>".into(),
        source,
    })?;
    Ok(())
}

pub fn read_trajectory_csv<R: io::Read>(input: R) -> Result<Vec<TrajectorySample>, WorldError> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

/// A running episode on one map.
#[derive(Debug, Clone)]
pub struct World {
    map: MapSpec,
    edges: Vec<Segment>,
    cfg: EpisodeConfig,
    goal: Point2,
    state: RobotState,
    history: VecDeque<LidarScan>,
    status: EpisodeStatus,
    distance: f64,
    trajectory: Vec<TrajectorySample>,
    noise_rng: ChaCha8Rng,
}

impl World {
    pub fn new(map: MapSpec, cfg: EpisodeConfig) -> Result<Self, WorldError> {
        cfg.validate()?;
        let edges = map.edges();
        let start = map.start;
        let goal = map.goal;
        let noise_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let mut w = World {
            map,
            edges,
            cfg,
            goal,
            state: RobotState::at(start),
            history: VecDeque::with_capacity(FRAMES),
            status: EpisodeStatus::Running,
            distance: 0.0,
            trajectory: vec![],
            noise_rng,
        };
        w.reset(start, goal);
        Ok(w)
    }

    /// Restarts at `start` with a new goal; the scan history is filled with
    /// copies of the first frame.
    pub fn reset(&mut self, start: Pose, goal: Point2) {
        self.goal = goal;
        self.state = RobotState::at(start);
        self.distance = 0.0;
        let scan = self.scan_at(&start);
        self.history.clear();
        for _ in 0..FRAMES {
            self.history.push_back(scan.clone());
        }
        self.status = episode_status(&self.state, &self.map, self.goal, &self.cfg);
        self.trajectory.clear();
        self.record();
    }

    pub fn reseed_noise(&mut self, seed: u64) {
        self.noise_rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn scan_at(&mut self, pose: &Pose) -> LidarScan {
        let mut scan = raycast_edges(&self.edges, pose);
        if self.cfg.lidar_noise_std > 0.0 {
            let noise = Normal::new(0.0, self.cfg.lidar_noise_std).expect("valid sigma");
            let ranges = scan
                .ranges
                .iter()
                .map(|r| r + noise.sample(&mut self.noise_rng))
                .collect();
            scan = LidarScan::new(ranges);
        }
        scan
    }

    fn record(&mut self) {
        let s = &self.state;
        self.trajectory.push(TrajectorySample {
            t: s.elapsed,
            x: s.pose.x,
            y: s.pose.y,
            theta: s.pose.theta(),
            v: s.v,
            omega: s.omega,
            status: self.status,
        });
    }

    /// Applies one control step. Once terminal, further steps are ignored.
    pub fn step(&mut self, cmd: Command) -> EpisodeStatus {
        if self.status.is_terminal() {
            return self.status;
        }
        let (next, chord) = step_kinematics(&self.state, cmd, self.cfg.dt, &self.cfg.limits);
        self.state = next;
        self.distance += chord;
        let scan = self.scan_at(&next.pose);
        self.history.pop_front();
        self.history.push_back(scan);
        self.status = episode_status(&self.state, &self.map, self.goal, &self.cfg);
        self.record();
        self.status
    }

    /// Observation for the first point of a new path (previous point at the robot).
    pub fn observation(&self) -> ObservationStack {
        let hist: Vec<LidarScan> = self.history.iter().cloned().collect();
        build_observation(&hist, &self.state.pose, self.goal, PathPoint::ORIGIN)
    }

    pub fn latest_scan(&self) -> &LidarScan {
        self.history.back().expect("history is never empty")
    }

    pub fn history(&self) -> impl Iterator<Item = &LidarScan> {
        self.history.iter()
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn status(&self) -> EpisodeStatus {
        self.status
    }

    pub fn goal(&self) -> Point2 {
        self.goal
    }

    pub fn map(&self) -> &MapSpec {
        &self.map
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    pub fn distance_travelled(&self) -> f64 {
        self.distance
    }

    pub fn distance_to_goal(&self) -> f64 {
        self.state.pose.position().distance(&self.goal)
    }

    pub fn trajectory(&self) -> &[TrajectorySample] {
        &self.trajectory
    }
}
