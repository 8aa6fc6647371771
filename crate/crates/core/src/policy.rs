//! Iterative path generation: one network evaluation per path point, each fed
//! the same scans and goal plus the previously generated point.

use crate::geometry::{GeometryError, GoalLocal, LocalPath, PathPoint};
use crate::nn::{
    log_prob_and_entropy, ActorCritic, ArchConfig, ConvSpec, GaussianHead, Graph, NnError, ParamStore, Tensor,
    EXTRA_INPUTS,
};
use crate::world::{ObservationStack, MAX_RANGE};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

/// Largest deflection a single path point may take.
pub const ALPHA_MAX: f64 = PI / 3.0;

const META_NAME: &str = "meta.config";
const META_LEN: usize = 13;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("network produced a non-finite output at path point {index}")]
    NonFinite { index: usize },
    #[error("invalid policy configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub n_points: usize,
    pub rho_max: f64,
    pub stochastic: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            n_points: 10,
            rho_max: 0.30,
            stochastic: false,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.n_points == 0 {
            return Err(PolicyError::Config("n_points must be at least 1".into()));
        }
        if !(self.rho_max.is_finite() && self.rho_max > 0.0) {
            return Err(PolicyError::Config(format!("rho_max must be positive, got {}", self.rho_max)));
        }
        Ok(())
    }
}

/// Maps an unbounded network action onto a path point with
/// `rho in [0, rho_max]` and `alpha in [-ALPHA_MAX, ALPHA_MAX]`.
pub fn squash(raw: [f64; 2], rho_max: f64) -> PathPoint {
    let rho = rho_max / (1.0 + (-raw[0]).exp());
    let alpha = ALPHA_MAX * raw[1].tanh();
    PathPoint::new(rho, alpha).expect("squashed point is in range")
}

/// Goal and previous point scaled to roughly unit range.
pub fn encode_extras(goal: &GoalLocal, prev: &PathPoint, rho_max: f64) -> [f64; EXTRA_INPUTS] {
    [
        goal.rho_g / MAX_RANGE,
        goal.theta_g / PI,
        prev.rho() / rho_max,
        prev.alpha() / ALPHA_MAX,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub raw: [f64; 2],
    pub log_prob: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutPath {
    pub path: LocalPath,
    pub per_point: Vec<PointRecord>,
}

impl RolloutPath {
    pub fn joint_log_prob(&self) -> f64 {
        self.per_point.iter().map(|p| p.log_prob).sum()
    }

    /// Critic estimate for the decision, taken at the robot's own position.
    pub fn value(&self) -> f64 {
        self.per_point[0].value
    }

    pub fn raw_actions(&self) -> Vec<f64> {
        self.per_point.iter().flat_map(|p| p.raw).collect()
    }
}

/// Scans are normalized frame-major ranges as produced by
/// [`ObservationStack::normalized_frames`].
pub fn generate_path<R: Rng + ?Sized>(
    net: &ActorCritic,
    store: &ParamStore,
    scans: &[f64],
    goal: GoalLocal,
    cfg: &PolicyConfig,
    rng: &mut R,
) -> Result<RolloutPath, PolicyError> {
    cfg.validate()?;
    let mut g = Graph::new(store);
    let s = g.input(net.scans_tensor(&[scans])?);
    let actor_trunk = net.actor_trunk(&mut g, s)?;
    let critic_trunk = net.critic_trunk(&mut g, s)?;
    let log_std = net.log_std_values(store);
    let mut prev = PathPoint::ORIGIN;
    let mut points = Vec::with_capacity(cfg.n_points);
    let mut per_point = Vec::with_capacity(cfg.n_points);
    for index in 0..cfg.n_points {
        let extras = g.input(Tensor::new(1, EXTRA_INPUTS, encode_extras(&goal, &prev, cfg.rho_max).to_vec()));
        let mean = net.actor_mean(&mut g, actor_trunk, extras)?;
        let value = net.critic_value(&mut g, critic_trunk, extras)?;
        let m = g.value(mean);
        let head = GaussianHead {
            mean: [m.data[0], m.data[1]],
            log_std,
        };
        let value = g.value(value).scalar();
        if !head.is_finite() || !value.is_finite() {
            return Err(PolicyError::NonFinite { index });
        }
        let raw = if cfg.stochastic { head.sample(rng) } else { head.mean };
        let (log_prob, _) = log_prob_and_entropy(&head, &raw);
        let point = squash(raw, cfg.rho_max);
        per_point.push(PointRecord { raw, log_prob, value });
        points.push(point);
        prev = point;
    }
    Ok(RolloutPath {
        path: LocalPath::new(points)?,
        per_point,
    })
}

/// Distribution of a single point given its predecessor.
pub fn point_head(
    net: &ActorCritic,
    store: &ParamStore,
    scans: &[f64],
    goal: GoalLocal,
    prev: PathPoint,
    rho_max: f64,
) -> Result<GaussianHead, PolicyError> {
    let mut g = Graph::new(store);
    let s = g.input(net.scans_tensor(&[scans])?);
    let trunk = net.actor_trunk(&mut g, s)?;
    let extras = g.input(Tensor::new(1, EXTRA_INPUTS, encode_extras(&goal, &prev, rho_max).to_vec()));
    let mean = net.actor_mean(&mut g, trunk, extras)?;
    let m = g.value(mean);
    Ok(GaussianHead {
        mean: [m.data[0], m.data[1]],
        log_std: net.log_std_values(store),
    })
}

/// Critic estimate of a state, evaluated at the robot's own position.
pub fn value_estimate(
    net: &ActorCritic,
    store: &ParamStore,
    scans: &[f64],
    goal: GoalLocal,
    rho_max: f64,
) -> Result<f64, PolicyError> {
    let mut g = Graph::new(store);
    let s = g.input(net.scans_tensor(&[scans])?);
    let trunk = net.critic_trunk(&mut g, s)?;
    let extras = g.input(Tensor::new(1, EXTRA_INPUTS, encode_extras(&goal, &PathPoint::ORIGIN, rho_max).to_vec()));
    let v = net.critic_value(&mut g, trunk, extras)?;
    let v = g.value(v).scalar();
    if !v.is_finite() {
        return Err(PolicyError::NonFinite { index: 0 });
    }
    Ok(v)
}

/// Network weights together with the path configuration they were trained for.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub arch: ArchConfig,
    pub cfg: PolicyConfig,
    pub store: ParamStore,
    pub net: ActorCritic,
}

impl PolicyModel {
    pub fn new(arch: ArchConfig, cfg: PolicyConfig, seed: u64) -> Result<Self, PolicyError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = ActorCritic::init(&mut store, &arch, &mut rng)?;
        store.add(META_NAME, &[META_LEN], encode_meta(&arch, &cfg))?;
        Ok(Self { arch, cfg, store, net })
    }

    pub fn from_store(store: ParamStore) -> Result<Self, PolicyError> {
        let id = store
            .id(META_NAME)
            .ok_or_else(|| PolicyError::Config("checkpoint has no policy metadata".into()))?;
        let (arch, cfg) = decode_meta(store.value(id))?;
        let net = ActorCritic::bind(&store, &arch)?;
        Ok(Self { arch, cfg, store, net })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PolicyError> {
        Ok(self.store.save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        Self::from_store(ParamStore::load(path)?)
    }

    pub fn generate<R: Rng + ?Sized>(&self, obs: &ObservationStack, rng: &mut R) -> Result<RolloutPath, PolicyError> {
        generate_path(&self.net, &self.store, &obs.normalized_frames(), obs.goal, &self.cfg, rng)
    }
}

fn encode_meta(arch: &ArchConfig, cfg: &PolicyConfig) -> Vec<f64> {
    vec![
        cfg.n_points as f64,
        cfg.rho_max,
        arch.frames as f64,
        arch.beams as f64,
        arch.conv1.filters as f64,
        arch.conv1.kernel as f64,
        arch.conv1.stride as f64,
        arch.conv2.filters as f64,
        arch.conv2.kernel as f64,
        arch.conv2.stride as f64,
        arch.trunk_width as f64,
        arch.hidden as f64,
        arch.leaky_slope,
    ]
}

fn decode_meta(m: &[f64]) -> Result<(ArchConfig, PolicyConfig), PolicyError> {
    if m.len() != META_LEN || m.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(PolicyError::Config("malformed policy metadata".into()));
    }
    let u = |i: usize| m[i] as usize;
    let arch = ArchConfig {
        frames: u(2),
        beams: u(3),
        conv1: ConvSpec {
            filters: u(4),
            kernel: u(5),
            stride: u(6),
        },
        conv2: ConvSpec {
            filters: u(7),
            kernel: u(8),
            stride: u(9),
        },
        trunk_width: u(10),
        hidden: u(11),
        leaky_slope: m[12],
        init_log_std: ArchConfig::default().init_log_std,
    };
    let cfg = PolicyConfig {
        n_points: u(0),
        rho_max: m[1],
        stochastic: false,
    };
    cfg.validate()?;
    Ok((arch, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{BEAMS, FRAMES};
    use proptest::prelude::*;

    fn scans(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..FRAMES * BEAMS).map(|_| rng.random_range(0.1..1.0)).collect()
    }

    fn model(seed: u64, n: usize) -> PolicyModel {
        let cfg = PolicyConfig {
            n_points: n,
            rho_max: 0.3,
            stochastic: false,
        };
        PolicyModel::new(ArchConfig::default(), cfg, seed).unwrap()
    }

    // The actor head starts near zero, so scale it up to get paths that differ
    // visibly between points.
    fn sharpened(seed: u64, n: usize) -> PolicyModel {
        let mut m = model(seed, n);
        let id = m.store.id("actor.out.weight").unwrap();
        for w in m.store.value_mut(id) {
            *w *= 300.0;
        }
        m
    }

    fn goal() -> GoalLocal {
        GoalLocal {
            rho_g: 3.0,
            theta_g: 0.7,
        }
    }

    #[test]
    fn zero_network_gives_midpoint() {
        let mut store = ParamStore::new();
        let net = ActorCritic::zeros(&mut store, &ArchConfig::default()).unwrap();
        let cfg = PolicyConfig {
            n_points: 1,
            rho_max: 0.3,
            stochastic: false,
        };
        let out = generate_path(&net, &store, &scans(0), goal(), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.path.len(), 1);
        assert_eq!(out.path.first().rho(), 0.15);
        assert_eq!(out.path.first().alpha(), 0.0);
    }

    #[test]
    fn deterministic_generation_repeats() {
        let m = sharpened(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = generate_path(&m.net, &m.store, &scans(1), goal(), &m.cfg, &mut rng).unwrap();
        let b = generate_path(&m.net, &m.store, &scans(1), goal(), &m.cfg, &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_point.len(), 3);
    }

    #[test]
    fn replay_reproduces_each_point() {
        let mut m = sharpened(4, 10);
        m.cfg.stochastic = true;
        let s = scans(2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = generate_path(&m.net, &m.store, &s, goal(), &m.cfg, &mut rng).unwrap();
        let pts = out.path.points();
        for i in 0..pts.len() {
            let prev = if i == 0 { PathPoint::ORIGIN } else { pts[i - 1] };
            let head = point_head(&m.net, &m.store, &s, goal(), prev, m.cfg.rho_max).unwrap();
            let (lp, _) = log_prob_and_entropy(&head, &out.per_point[i].raw);
            assert_eq!(lp, out.per_point[i].log_prob);
            assert_eq!(squash(out.per_point[i].raw, m.cfg.rho_max), pts[i]);
        }
    }

    #[test]
    fn markov_point_ignores_older_history() {
        let m = sharpened(5, 3);
        let s = scans(3);
        let prev = PathPoint::new(0.2, 0.1).unwrap();
        let a = point_head(&m.net, &m.store, &s, goal(), prev, 0.3).unwrap();
        // Any chain reaching `prev` yields the same direction for the next point,
        // whatever came before it.
        let b = point_head(&m.net, &m.store, &s, goal(), prev, 0.3).unwrap();
        assert_eq!(a, b);
        let other = point_head(&m.net, &m.store, &s, goal(), PathPoint::new(0.05, -0.4).unwrap(), 0.3).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn stochastic_generation_is_seed_reproducible() {
        let mut m = sharpened(6, 5);
        m.cfg.stochastic = true;
        let s = scans(4);
        let run = |seed| generate_path(&m.net, &m.store, &s, goal(), &m.cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn joint_log_prob_sums_points() {
        let mut m = sharpened(7, 4);
        m.cfg.stochastic = true;
        let out = m
            .generate(
                &ObservationStack {
                    frames: std::array::from_fn(|_| crate::world::LidarScan::open()),
                    goal: goal(),
                    prev_point: PathPoint::ORIGIN,
                },
                &mut ChaCha8Rng::seed_from_u64(1),
            )
            .unwrap();
        let s: f64 = out.per_point.iter().map(|p| p.log_prob).sum();
        assert_eq!(out.joint_log_prob(), s);
        assert_eq!(out.raw_actions().len(), 8);
    }

    #[test]
    fn checkpoint_keeps_config_and_outputs() {
        let m = sharpened(8, 15);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.ckpt");
        m.save(&p).unwrap();
        let back = PolicyModel::load(&p).unwrap();
        assert_eq!(back.cfg, m.cfg);
        assert_eq!(back.arch, m.arch);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = generate_path(&m.net, &m.store, &scans(5), goal(), &m.cfg, &mut rng).unwrap();
        let b = generate_path(&back.net, &back.store, &scans(5), goal(), &back.cfg, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_weights_abort() {
        let mut m = model(9, 2);
        let id = m.store.id("actor.out.bias").unwrap();
        m.store.value_mut(id)[0] = f64::NAN;
        let r = generate_path(&m.net, &m.store, &scans(6), goal(), &m.cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(PolicyError::NonFinite { index: 0 })));
    }

    #[test]
    fn value_estimate_matches_first_point() {
        let m = sharpened(12, 3);
        let s = scans(8);
        let out = generate_path(&m.net, &m.store, &s, goal(), &m.cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(value_estimate(&m.net, &m.store, &s, goal(), 0.3).unwrap(), out.value());
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(PolicyConfig { n_points: 0, ..Default::default() }.validate().is_err());
        assert!(PolicyConfig { rho_max: 0.0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn squash_respects_bounds(r0 in -50.0..50.0f64, r1 in -50.0..50.0f64, rho_max in 0.01..1.0f64) {
            let p = squash([r0, r1], rho_max);
            prop_assert!(p.rho() >= 0.0 && p.rho() <= rho_max);
            prop_assert!(p.alpha().abs() <= ALPHA_MAX);
        }
    }

    #[test]
    fn generated_points_respect_bounds() {
        let mut m = sharpened(10, 15);
        m.cfg.stochastic = true;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..5 {
            let out = generate_path(&m.net, &m.store, &scans(k), goal(), &m.cfg, &mut rng).unwrap();
            for p in out.path.points() {
                assert!(p.rho() >= 0.0 && p.rho() <= 0.3);
                assert!(p.alpha().abs() <= ALPHA_MAX);
            }
        }
    }
}
