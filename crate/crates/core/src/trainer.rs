//! Multi-worker PPO training of the path policy.
//!
//! Each worker owns one environment and produces one transition per control
//! step: generate a path, score it, execute the fine-tuned command, observe.
//! Workers only read the parameter snapshot; the learner applies all updates.

use crate::controller::{fine_tune, FineTuneConfig};
use crate::geometry::{PathPoint, Point2, Pose};
use crate::nn::{ActorCritic, AdamConfig, ArchConfig, Graph, NnError, Tensor, Var, EXTRA_INPUTS};
use crate::policy::{encode_extras, generate_path, value_estimate, PolicyConfig, PolicyError, PolicyModel};
use crate::reward::{total_reward, COLLISION_PENALTY};
use crate::world::{EpisodeConfig, EpisodeStatus, MapSpec, World, WorldError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{E, PI};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("could not place a start and goal on map {0}")]
    Spawn(String),
    #[error("resume failed: {0}")]
    Resume(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub workers: usize,
    /// Aggregate episode budget over all workers.
    pub total_episodes: u64,
    /// Decisions collected per worker between updates.
    pub horizon: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub epochs_per_batch: usize,
    pub minibatch_size: usize,
    pub lr: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// Gradient norm cap, applied to actor and critic separately.
    pub max_grad_norm: f64,
    pub seed: u64,
    pub success_bonus: f64,
    /// Numbered checkpoint every this many updates; `latest.ckpt` is refreshed
    /// after every update.
    pub checkpoint_every: u64,
    /// Run every worker on the calling thread.
    pub deterministic: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            workers: 24,
            total_episodes: 120_000,
            horizon: 128,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            epochs_per_batch: 4,
            minibatch_size: 256,
            lr: 3e-4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
            seed: 0,
            success_bonus: 0.0,
            checkpoint_every: 10,
            deterministic: false,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.workers == 0 || self.horizon == 0 || self.minibatch_size == 0 || self.epochs_per_batch == 0 {
            return bad("workers, horizon, minibatch_size and epochs_per_batch must be positive".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.gae_lambda > 0.0 && self.gae_lambda <= 1.0) {
            return bad(format!("gamma {} and gae_lambda {} must lie in (0, 1]", self.gamma, self.gae_lambda));
        }
        if !(self.clip_eps > 0.0) || !(self.lr > 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("clip_eps, lr and max_grad_norm must be positive".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub ppo: PpoConfig,
    pub policy: PolicyConfig,
    pub arch: ArchConfig,
    pub episode: EpisodeConfig,
    pub fine_tune: FineTuneConfig,
    /// Minimum start to goal distance for sampled episodes.
    pub min_separation: f64,
    /// Extra clearance beyond the robot radius required at start and goal.
    pub spawn_margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ppo: PpoConfig::default(),
            policy: PolicyConfig {
                stochastic: true,
                ..PolicyConfig::default()
            },
            arch: ArchConfig::default(),
            episode: EpisodeConfig::default(),
            fine_tune: FineTuneConfig::default(),
            min_separation: 0.5,
            spawn_margin: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.ppo.validate()?;
        self.policy.validate()?;
        self.arch.validate()?;
        self.episode.validate()?;
        self.fine_tune.validate().map_err(TrainError::Config)?;
        if !(self.min_separation >= 0.0 && self.spawn_margin >= 0.0) {
            return Err(TrainError::Config("separation and margin must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One decision: observation, sampled path, and its scored outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// Normalized scan stack.
    pub scans: Vec<f64>,
    /// Network extras for each path point, given its predecessor.
    pub extras: Vec<[f64; EXTRA_INPUTS]>,
    /// Pre-squash actions, two per point.
    pub action_raw: Vec<f64>,
    /// Sum of per-point log densities.
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    /// Episode ended here; timeouts carry their bootstrap inside `reward`.
    pub terminal: bool,
    /// Decisions already taken in this episode.
    pub episode_step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Collision,
    Timeout,
    Aborted,
}

impl From<EpisodeStatus> for Outcome {
    fn from(s: EpisodeStatus) -> Self {
        match s {
            EpisodeStatus::Success => Outcome::Success,
            EpisodeStatus::Collision => Outcome::Collision,
            EpisodeStatus::Timeout | EpisodeStatus::Running => Outcome::Timeout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub length_m: f64,
    pub steps: u64,
    pub status: Outcome,
}

struct Env {
    world: World,
    ret: f64,
    steps: u64,
    first: usize,
}

/// One rollout worker with its own environment and episode quota.
pub struct Worker {
    pub id: usize,
    /// Episodes this worker may start; `None` means unlimited.
    pub quota: Option<u64>,
    pub started: u64,
    env: Option<Env>,
}

impl Worker {
    pub fn new(id: usize, quota: Option<u64>) -> Self {
        Self {
            id,
            quota,
            started: 0,
            env: None,
        }
    }

    /// Worker can still produce transitions.
    pub fn active(&self) -> bool {
        self.env.is_some() || self.quota.is_none_or(|q| self.started < q)
    }
}

/// Transitions of one worker for one collection round.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub worker: usize,
    pub transitions: Vec<Transition>,
    /// Critic value after the last transition, used when it is not terminal.
    pub last_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub segments: Vec<Segment>,
    /// Finished episodes in worker order; `episode` is numbered per round.
    pub episodes: Vec<EpisodeRecord>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.transitions.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of an independent random stream keyed by `(seed, a, b)`.
pub fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ a) ^ b)
}

/// Rejection-samples a start pose and goal with clearance and separation.
pub fn sample_start_goal<R: Rng + ?Sized>(
    map: &MapSpec,
    clearance: f64,
    min_separation: f64,
    rng: &mut R,
) -> Result<(Pose, Point2), TrainError> {
    let b = map.bounds;
    let free = |rng: &mut R| {
        (0..1000).find_map(|_| {
            let p = Point2::new(rng.random_range(b.x0..b.x1), rng.random_range(b.y0..b.y1));
            (map.clearance(p) > clearance).then_some(p)
        })
    };
    for _ in 0..100 {
        let (Some(s), Some(g)) = (free(rng), free(rng)) else { break };
        if s.distance(&g) >= min_separation {
            let theta = rng.random_range(-PI..PI);
            return Ok((Pose::new(s.x, s.y, theta), g));
        }
    }
    Err(TrainError::Spawn(map.name.clone()))
}

fn start_episode(
    worker: &mut Worker,
    maps: &[MapSpec],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    first: usize,
) -> Result<(), TrainError> {
    let map = &maps[rng.random_range(0..maps.len())];
    let clearance = cfg.episode.robot_radius + cfg.spawn_margin;
    let (start, goal) = sample_start_goal(map, clearance, cfg.min_separation, rng)?;
    let mut episode = cfg.episode.clone();
    episode.rng_seed = rng.random();
    let mut world = World::new(map.clone(), episode)?;
    world.reset(start, goal);
    worker.env = Some(Env {
        world,
        ret: 0.0,
        steps: 0,
        first,
    });
    worker.started += 1;
    Ok(())
}

fn run_worker(
    model: &PolicyModel,
    worker: &mut Worker,
    maps: &[MapSpec],
    horizon: usize,
    round: u64,
    cfg: &TrainConfig,
) -> Result<(Segment, Vec<EpisodeRecord>), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.ppo.seed, worker.id as u64, round));
    let mut out: Vec<Transition> = Vec::with_capacity(horizon);
    let mut episodes = vec![];
    let policy = PolicyConfig {
        stochastic: true,
        ..cfg.policy
    };
    let rho_max = policy.rho_max;
    let gamma = cfg.ppo.gamma;
    while out.len() < horizon {
        if worker.env.is_none() {
            if !worker.active() {
                break;
            }
            start_episode(worker, maps, cfg, &mut rng, out.len())?;
        }
        let env = worker.env.as_mut().expect("episode is running");
        let obs = env.world.observation();
        let scans = obs.normalized_frames();
        let rollout = match generate_path(&model.net, &model.store, &scans, obs.goal, &policy, &mut rng) {
            Ok(r) => r,
            Err(PolicyError::NonFinite { index }) => {
                log::warn!("worker {}: non-finite policy output at point {index}, episode dropped", worker.id);
                out.truncate(env.first);
                episodes.push(EpisodeRecord {
                    episode: 0,
                    ret: env.ret,
                    length_m: env.world.distance_travelled(),
                    steps: env.steps,
                    status: Outcome::Aborted,
                });
                worker.env = None;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let pose = env.world.state().pose;
        let scan = env.world.latest_scan();
        let r = total_reward(&rollout.path, &pose, scan, env.world.goal(), cfg.episode.robot_radius);
        let mut reward = r.total;
        let status = if r.terminal {
            EpisodeStatus::Collision
        } else {
            let (_, cmd) = fine_tune(scan, &rollout.path.first(), env.world.distance_to_goal(), &cfg.fine_tune);
            let status = env.world.step(cmd);
            match status {
                EpisodeStatus::Success => reward += cfg.ppo.success_bonus,
                EpisodeStatus::Collision => reward += COLLISION_PENALTY,
                EpisodeStatus::Timeout => {
                    let next = env.world.observation();
                    let v = value_estimate(&model.net, &model.store, &next.normalized_frames(), next.goal, rho_max)?;
                    reward += gamma * v;
                }
                EpisodeStatus::Running => {}
            }
            status
        };
        let mut prev = PathPoint::ORIGIN;
        let extras = rollout
            .path
            .points()
            .iter()
            .map(|p| {
                let e = encode_extras(&obs.goal, &prev, rho_max);
                prev = *p;
                e
            })
            .collect();
        let terminal = status.is_terminal();
        out.push(Transition {
            scans,
            extras,
            action_raw: rollout.raw_actions(),
            log_prob: rollout.joint_log_prob(),
            reward,
            value: rollout.value(),
            terminal,
            episode_step: env.steps,
        });
        env.ret += reward;
        env.steps += 1;
        if terminal {
            episodes.push(EpisodeRecord {
                episode: 0,
                ret: env.ret,
                length_m: env.world.distance_travelled(),
                steps: env.steps,
                status: status.into(),
            });
            worker.env = None;
        }
    }
    let last_value = match &worker.env {
        Some(env) => {
            let obs = env.world.observation();
            value_estimate(&model.net, &model.store, &obs.normalized_frames(), obs.goal, rho_max)?
        }
        None => 0.0,
    };
    // An unfinished episode continues in the next round with fresh indices.
    if let Some(env) = worker.env.as_mut() {
        env.first = 0;
    }
    Ok((
        Segment {
            worker: worker.id,
            transitions: out,
            last_value,
        },
        episodes,
    ))
}

/// Runs every worker for up to `horizon` decisions against a fixed snapshot.
pub fn collect_rollouts(
    model: &PolicyModel,
    workers: &mut [Worker],
    maps: &[MapSpec],
    horizon: usize,
    round: u64,
    cfg: &TrainConfig,
) -> Result<Rollout, TrainError> {
    if maps.is_empty() {
        return Err(TrainError::Config("no training maps".into()));
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(workers.len());
    let results: Vec<Result<(Segment, Vec<EpisodeRecord>), TrainError>> = if cfg.ppo.deterministic || threads <= 1 {
        workers
            .iter_mut()
            .map(|w| run_worker(model, w, maps, horizon, round, cfg))
            .collect()
    } else {
        let chunk = workers.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = workers
                .chunks_mut(chunk)
                .map(|ws| {
                    s.spawn(move || {
                        ws.iter_mut()
                            .map(|w| run_worker(model, w, maps, horizon, round, cfg))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("rollout worker panicked"))
                .collect()
        })
    };
    let mut segments = vec![];
    let mut episodes = vec![];
    for r in results {
        let (seg, eps) = r?;
        segments.push(seg);
        episodes.extend(eps);
    }
    for (i, e) in episodes.iter_mut().enumerate() {
        e.episode = i as u64;
    }
    Ok(Rollout { segments, episodes })
}

/// Generalized advantage estimates and value targets for one contiguous
/// sequence. `last_value` bootstraps a non-terminal final step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    terminals: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert!(rewards.len() == values.len() && values.len() == terminals.len());
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut gae = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { last_value };
        let live = if terminals[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next * live - values[t];
        gae = delta + gamma * lambda * live * gae;
        adv[t] = gae;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shifts and scales to zero mean and unit variance; a single element becomes 0.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len();
    if n == 0 {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n as f64;
    adv.iter_mut().for_each(|a| *a -= mean);
    if n == 1 {
        return;
    }
    let var = adv.iter().map(|a| a * a).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std > 1e-12 {
        adv.iter_mut().for_each(|a| *a /= std);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    /// Mean joint entropy of the path distribution.
    pub entropy: f64,
    pub total: f64,
    /// Mean of `old_log_prob - new_log_prob`.
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

struct LossGraph {
    loss: Var,
    stats: LossStats,
}

fn build_loss(
    g: &mut Graph,
    net: &ActorCritic,
    batch: &[&Transition],
    adv: &[f64],
    ret: &[f64],
    cfg: &PpoConfig,
) -> Result<LossGraph, TrainError> {
    let b = batch.len();
    let n = batch[0].extras.len();
    if batch.iter().any(|t| t.extras.len() != n || t.action_raw.len() != 2 * n) {
        return Err(TrainError::Config("transitions in a batch must share the path length".into()));
    }
    let scans: Vec<&[f64]> = batch.iter().map(|t| t.scans.as_slice()).collect();
    let scans = g.input(net.scans_tensor(&scans)?);
    let extras: Vec<f64> = batch.iter().flat_map(|t| t.extras.iter().flatten().copied()).collect();
    let extras = g.input(Tensor::new(b * n, EXTRA_INPUTS, extras));
    let first: Vec<f64> = batch.iter().flat_map(|t| t.extras[0]).collect();
    let first = g.input(Tensor::new(b, EXTRA_INPUTS, first));
    let actions: Vec<f64> = batch.iter().flat_map(|t| t.action_raw.iter().copied()).collect();
    let actions = g.input(Tensor::new(b * n, 2, actions));
    let old = g.input(Tensor::new(b, 1, batch.iter().map(|t| t.log_prob).collect()));
    let advv = g.input(Tensor::new(b, 1, adv.to_vec()));
    let retv = g.input(Tensor::new(b, 1, ret.to_vec()));

    let trunk = net.actor_trunk(g, scans)?;
    let trunk = g.repeat_rows(trunk, n);
    let mean = net.actor_mean(g, trunk, extras)?;
    let log_std = net.log_std(g);
    let ls = g.broadcast_rows(log_std, b * n)?;
    let diff = g.sub(actions, mean)?;
    let neg = g.scale(ls, -1.0);
    let inv_std = g.exp(neg);
    let z = g.mul(diff, inv_std)?;
    let z2 = g.square(z);
    let half = g.scale(z2, -0.5);
    let per_dim = g.sub(half, ls)?;
    let per_point = g.sum_cols(per_dim);
    let per_point = g.offset(per_point, -(2.0 * PI).ln());
    let joint = g.group_sum_rows(per_point, n)?;

    let log_ratio = g.sub(joint, old)?;
    let ratio = g.exp(log_ratio);
    let s1 = g.mul(ratio, advv)?;
    let clipped = g.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    let s2 = g.mul(clipped, advv)?;
    let surr = g.minimum(s1, s2)?;
    let surr = g.mean(surr);
    let policy_loss = g.scale(surr, -1.0);

    let ctrunk = net.critic_trunk(g, scans)?;
    let value = net.critic_value(g, ctrunk, first)?;
    let err = g.sub(value, retv)?;
    let sq = g.square(err);
    let value_loss = g.mean(sq);

    let ls_sum = g.sum(log_std);
    let ent = g.scale(ls_sum, n as f64);
    let entropy = g.offset(ent, n as f64 * (2.0 * PI * E).ln());

    let vterm = g.scale(value_loss, cfg.value_coef);
    let eterm = g.scale(entropy, cfg.entropy_coef);
    let loss = g.add(policy_loss, vterm)?;
    let loss = g.sub(loss, eterm)?;

    let r = g.value(ratio);
    let lr = g.value(log_ratio);
    let clip_fraction = r.data.iter().filter(|x| (**x - 1.0).abs() > cfg.clip_eps).count() as f64 / b as f64;
    let approx_kl = -lr.data.iter().sum::<f64>() / b as f64;
    let stats = LossStats {
        policy_loss: g.value(policy_loss).scalar(),
        value_loss: g.value(value_loss).scalar(),
        entropy: g.value(entropy).scalar(),
        total: g.value(loss).scalar(),
        approx_kl,
        clip_fraction,
    };
    Ok(LossGraph { loss, stats })
}

/// Evaluates the clipped objective on `batch` without updating anything.
pub fn ppo_loss(
    model: &PolicyModel,
    batch: &[Transition],
    adv: &[f64],
    ret: &[f64],
    cfg: &PpoConfig,
) -> Result<LossStats, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let refs: Vec<&Transition> = batch.iter().collect();
    let mut g = Graph::new(&model.store);
    Ok(build_loss(&mut g, &model.net, &refs, adv, ret, cfg)?.stats)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Averages over the applied minibatch steps.
    pub loss: LossStats,
    pub steps: usize,
    pub skipped: usize,
}

/// Clipped-surrogate epochs over `batch`. Advantages are used as given.
pub fn ppo_update<R: Rng + ?Sized>(
    model: &mut PolicyModel,
    batch: &[Transition],
    adv: &[f64],
    ret: &[f64],
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let adam = AdamConfig::default();
    let actor = model.net.actor_ids();
    let critic = model.net.critic_ids();
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    let mut stats = UpdateStats::default();
    let mut sum = LossStats::default();
    for _ in 0..cfg.epochs_per_batch {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.minibatch_size) {
            let mb: Vec<&Transition> = chunk.iter().map(|&i| &batch[i]).collect();
            let a: Vec<f64> = chunk.iter().map(|&i| adv[i]).collect();
            let r: Vec<f64> = chunk.iter().map(|&i| ret[i]).collect();
            let (mut grads, s) = {
                let mut g = Graph::new(&model.store);
                let lg = build_loss(&mut g, &model.net, &mb, &a, &r, cfg)?;
                if !lg.stats.total.is_finite() {
                    log::warn!("non-finite loss, minibatch skipped");
                    stats.skipped += 1;
                    continue;
                }
                match g.backward(lg.loss) {
                    Ok(gr) => (gr, lg.stats),
                    Err(NnError::NonFiniteGradient(name)) => {
                        log::warn!("non-finite gradient in {name}, minibatch skipped");
                        stats.skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                }
            };
            for ids in [&actor, &critic] {
                let norm = grads.norm_of(ids);
                if norm > cfg.max_grad_norm {
                    grads.scale(ids, cfg.max_grad_norm / norm);
                }
            }
            model.store.zero_grad();
            if let Err(e) = model.store.accumulate(&grads) {
                log::warn!("{e}, minibatch skipped");
                stats.skipped += 1;
                continue;
            }
            model.store.adam_step(cfg.lr, &adam);
            model.net.project(&mut model.store);
            stats.steps += 1;
            sum.policy_loss += s.policy_loss;
            sum.value_loss += s.value_loss;
            sum.entropy += s.entropy;
            sum.total += s.total;
            sum.approx_kl += s.approx_kl;
            sum.clip_fraction += s.clip_fraction;
        }
    }
    if stats.steps > 0 {
        let k = stats.steps as f64;
        stats.loss = LossStats {
            policy_loss: sum.policy_loss / k,
            value_loss: sum.value_loss / k,
            entropy: sum.entropy / k,
            total: sum.total / k,
            approx_kl: sum.approx_kl / k,
            clip_fraction: sum.clip_fraction / k,
        };
    }
    Ok(stats)
}

/// Flattens a rollout into a batch with normalized advantages and returns.
pub fn prepare_batch(rollout: Rollout, cfg: &PpoConfig) -> (Vec<Transition>, Vec<f64>, Vec<f64>) {
    let mut batch = vec![];
    let mut adv = vec![];
    let mut ret = vec![];
    for seg in rollout.segments {
        let r: Vec<f64> = seg.transitions.iter().map(|t| t.reward).collect();
        let v: Vec<f64> = seg.transitions.iter().map(|t| t.value).collect();
        let d: Vec<bool> = seg.transitions.iter().map(|t| t.terminal).collect();
        let (a, rt) = compute_gae(&r, &v, &d, seg.last_value, cfg.gamma, cfg.gae_lambda);
        adv.extend(a);
        ret.extend(rt);
        batch.extend(seg.transitions);
    }
    normalize_advantages(&mut adv);
    (batch, adv, ret)
}

pub const LOG_FILE: &str = "training_log.csv";
pub const STATE_FILE: &str = "trainer_state.json";
pub const CONFIG_FILE: &str = "config.json";
pub const LATEST: &str = "latest.ckpt";

pub fn checkpoint_name(update: u64) -> String {
    format!("checkpoint_{update:06}.ckpt")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub update: u64,
    pub episodes: u64,
    pub worker_started: Vec<u64>,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub updates: u64,
    pub episodes: u64,
    pub interrupted: bool,
    /// Location of the newest checkpoint.
    pub latest: PathBuf,
}

fn quotas(total: u64, workers: usize) -> Vec<u64> {
    let w = workers as u64;
    (0..w).map(|i| total / w + u64::from(i < total % w)).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

fn save_checkpoint(model: &PolicyModel, out: &Path, update: u64, numbered: bool) -> Result<(), TrainError> {
    let mut buf = vec![];
    model.store.write_to(&mut buf)?;
    if numbered {
        write_atomic(&out.join(checkpoint_name(update)), &buf)?;
    }
    write_atomic(&out.join(LATEST), &buf)?;
    Ok(())
}

fn read_log(path: &Path, keep: u64) -> Result<Vec<EpisodeRecord>, TrainError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = vec![];
    for r in rdr.deserialize() {
        let r: EpisodeRecord = r?;
        if r.episode < keep {
            out.push(r);
        }
    }
    Ok(out)
}

fn open_log(path: &Path, existing: &[EpisodeRecord]) -> Result<csv::Writer<fs::File>, TrainError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["episode", "return", "length_m", "steps", "status"])?;
    for r in existing {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(w)
}

/// Ways to pause a run early; a paused run resumes when trained again.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainControl<'a> {
    /// Checked before every update.
    pub stop: Option<&'a AtomicBool>,
    /// Pause after this many updates in the current invocation.
    pub max_updates: Option<u64>,
}

/// Trains until the episode budget is spent or `stop` is raised. A directory
/// holding an unfinished run with the same configuration is resumed from its
/// latest checkpoint.
pub fn train(
    cfg: &TrainConfig,
    maps: &[MapSpec],
    out: &Path,
    stop: Option<&AtomicBool>,
) -> Result<TrainOutcome, TrainError> {
    train_with(cfg, maps, out, TrainControl { stop, max_updates: None })
}

pub fn train_with(
    cfg: &TrainConfig,
    maps: &[MapSpec],
    out: &Path,
    control: TrainControl,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if maps.is_empty() {
        return Err(TrainError::Config("no training maps".into()));
    }
    for m in maps {
        m.validate(cfg.episode.robot_radius)?;
    }
    fs::create_dir_all(out)?;
    let config_json = serde_json::to_string_pretty(cfg)?;
    let state_path = out.join(STATE_FILE);
    let log_path = out.join(LOG_FILE);

    let (mut model, mut state, existing) = if state_path.exists() {
        let state: TrainerState = serde_json::from_str(&fs::read_to_string(&state_path)?)?;
        let saved = fs::read_to_string(out.join(CONFIG_FILE)).unwrap_or_default();
        let saved_cfg: Option<TrainConfig> = serde_json::from_str(&saved).ok();
        if saved_cfg.as_ref() != Some(cfg) {
            return Err(TrainError::Resume(format!(
                "{} holds a run with a different configuration",
                out.display()
            )));
        }
        if state.worker_started.len() != cfg.ppo.workers {
            return Err(TrainError::Resume("worker count changed".into()));
        }
        let model = PolicyModel::load(out.join(LATEST))?;
        let existing = read_log(&log_path, state.episodes)?;
        if existing.len() as u64 != state.episodes {
            return Err(TrainError::Resume("training log is shorter than the saved state".into()));
        }
        log::info!("resuming {} at update {} after {} episodes", out.display(), state.update, state.episodes);
        (model, state, existing)
    } else {
        let model = PolicyModel::new(cfg.arch.clone(), cfg.policy, stream_seed(cfg.ppo.seed, 0xA11CE, 0))?;
        let state = TrainerState {
            update: 0,
            episodes: 0,
            worker_started: vec![0; cfg.ppo.workers],
            complete: false,
        };
        write_atomic(&out.join(CONFIG_FILE), config_json.as_bytes())?;
        save_checkpoint(&model, out, 0, true)?;
        write_atomic(&state_path, serde_json::to_string_pretty(&state)?.as_bytes())?;
        (model, state, vec![])
    };
    let mut log = open_log(&log_path, &existing)?;
    if state.complete {
        return Ok(TrainOutcome {
            updates: state.update,
            episodes: state.episodes,
            interrupted: false,
            latest: out.join(LATEST),
        });
    }

    let q = quotas(cfg.ppo.total_episodes, cfg.ppo.workers);
    let mut workers: Vec<Worker> = (0..cfg.ppo.workers)
        .map(|i| {
            let mut w = Worker::new(i, Some(q[i]));
            w.started = state.worker_started[i];
            w
        })
        .collect();
    let mut interrupted = false;
    let mut done_here = 0;
    while workers.iter().any(Worker::active) {
        let paused = control.max_updates.is_some_and(|m| done_here >= m);
        if paused || control.stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
            interrupted = true;
            break;
        }
        done_here += 1;
        let round = state.update;
        let rollout = collect_rollouts(&model, &mut workers, maps, cfg.ppo.horizon, round, cfg)?;
        let mut finished = rollout.episodes.clone();
        let (batch, adv, ret) = prepare_batch(rollout, &cfg.ppo);
        let step_reward = batch.iter().map(|t| t.reward).sum::<f64>() / batch.len().max(1) as f64;
        let mut lrng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.ppo.seed, u64::MAX, round));
        let stats = if batch.is_empty() {
            UpdateStats::default()
        } else {
            ppo_update(&mut model, &batch, &adv, &ret, &cfg.ppo, &mut lrng)?
        };
        for e in finished.iter_mut() {
            e.episode += state.episodes;
            log.serialize(&*e)?;
        }
        log.flush()?;
        state.update += 1;
        state.episodes += finished.len() as u64;
        // Episodes still running when the loop ends are not logged, so count
        // only finished ones toward the resume point.
        for (s, w) in state.worker_started.iter_mut().zip(&workers) {
            *s = w.started - u64::from(w.env.is_some());
        }
        let successes = finished.iter().filter(|e| e.status == Outcome::Success).count();
        let mean_ret = if finished.is_empty() {
            f64::NAN
        } else {
            finished.iter().map(|e| e.ret).sum::<f64>() / finished.len() as f64
        };
        log::info!(
            "update {} episodes {} batch {} step_reward {:.3} finished {} success {} mean_return {:.3} policy {:.4} value {:.4} entropy {:.3} kl {:.5} clip {:.3}",
            state.update,
            state.episodes,
            batch.len(),
            step_reward,
            finished.len(),
            successes,
            mean_ret,
            stats.loss.policy_loss,
            stats.loss.value_loss,
            stats.loss.entropy,
            stats.loss.approx_kl,
            stats.loss.clip_fraction
        );
        save_checkpoint(&model, out, state.update, state.update % cfg.ppo.checkpoint_every == 0)?;
        write_atomic(&state_path, serde_json::to_string_pretty(&state)?.as_bytes())?;
    }
    if !interrupted {
        state.complete = true;
        save_checkpoint(&model, out, state.update, true)?;
        write_atomic(&state_path, serde_json::to_string_pretty(&state)?.as_bytes())?;
    }
    Ok(TrainOutcome {
        updates: state.update,
        episodes: state.episodes,
        interrupted,
        latest: out.join(LATEST),
    })
}
