//! Actor and critic towers for the path policy.
//!
//! Each tower maps the stacked scans through two strided convolutions and a
//! dense layer to the trunk width, then joins the four extra inputs (goal and
//! previous point) ahead of a leaky dense hidden layer. The actor ends in the
//! Gaussian mean, the critic in a scalar value; the two towers share no
//! weights.

use super::graph::{ConvGeom, Graph, Tensor, Var};
use super::params::{ParamId, ParamStore};
use super::NnError;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::{E, PI};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;
pub const ACTION_DIM: usize = 2;
pub const EXTRA_INPUTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub frames: usize,
    pub beams: usize,
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub trunk_width: usize,
    pub hidden: usize,
    pub leaky_slope: f64,
    pub init_log_std: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            frames: 3,
            beams: 180,
            conv1: ConvSpec {
                filters: 32,
                kernel: 5,
                stride: 2,
            },
            conv2: ConvSpec {
                filters: 16,
                kernel: 3,
                stride: 2,
            },
            trunk_width: 256,
            hidden: 128,
            leaky_slope: 0.01,
            init_log_std: -0.5,
        }
    }
}

impl ArchConfig {
    pub fn conv1_geom(&self) -> ConvGeom {
        ConvGeom {
            in_channels: self.frames,
            length: self.beams,
            out_channels: self.conv1.filters,
            kernel: self.conv1.kernel,
            stride: self.conv1.stride,
        }
    }

    pub fn conv2_geom(&self) -> ConvGeom {
        let c1 = self.conv1_geom();
        ConvGeom {
            in_channels: c1.out_channels,
            length: c1.out_length(),
            out_channels: self.conv2.filters,
            kernel: self.conv2.kernel,
            stride: self.conv2.stride,
        }
    }

    pub fn scan_features(&self) -> usize {
        self.frames * self.beams
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let c1 = self.conv1_geom();
        if c1.kernel == 0 || c1.stride == 0 || c1.length < c1.kernel {
            return Err(NnError::Config("first convolution does not fit the scan".into()));
        }
        let c2 = self.conv2_geom();
        if c2.kernel == 0 || c2.stride == 0 || c2.length < c2.kernel {
            return Err(NnError::Config("second convolution does not fit".into()));
        }
        if self.trunk_width == 0 || self.hidden == 0 || self.frames == 0 {
            return Err(NnError::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Tower {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    fc_w: ParamId,
    fc_b: ParamId,
    hidden_w: ParamId,
    hidden_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Handles into a [`ParamStore`] laid out for [`ArchConfig`].
#[derive(Debug, Clone)]
pub struct ActorCritic {
    arch: ArchConfig,
    actor: Tower,
    critic: Tower,
    log_std: ParamId,
}

/// Network input for one path point.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput {
    /// Normalized ranges, frame-major.
    pub scans: Vec<f64>,
    /// Goal (rho, theta) and previous point (rho, alpha), already scaled.
    pub extras: [f64; EXTRA_INPUTS],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianHead {
    pub mean: [f64; ACTION_DIM],
    pub log_std: [f64; ACTION_DIM],
}

impl GaussianHead {
    pub fn std(&self) -> [f64; ACTION_DIM] {
        self.log_std.map(f64::exp)
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.log_std).all(|v| v.is_finite())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; ACTION_DIM] {
        let std = self.std();
        std::array::from_fn(|d| {
            let z: f64 = rng.sample(StandardNormal);
            self.mean[d] + std[d] * z
        })
    }
}

/// Diagonal Gaussian log density and entropy of `head` at `action`.
pub fn log_prob_and_entropy(head: &GaussianHead, action: &[f64; ACTION_DIM]) -> (f64, f64) {
    let mut lp = 0.0;
    let mut ent = 0.0;
    for d in 0..ACTION_DIM {
        let ls = head.log_std[d];
        let z = (action[d] - head.mean[d]) / ls.exp();
        lp += -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln();
        ent += ls + 0.5 * (2.0 * PI * E).ln();
    }
    (lp, ent)
}

fn tower_names(prefix: &str) -> [String; 10] {
    [
        "conv1.weight",
        "conv1.bias",
        "conv2.weight",
        "conv2.bias",
        "fc.weight",
        "fc.bias",
        "hidden.weight",
        "hidden.bias",
        "out.weight",
        "out.bias",
    ]
    .map(|n| format!("{prefix}.{n}"))
}

fn tower_shapes(arch: &ArchConfig, outputs: usize) -> [Vec<usize>; 10] {
    let c1 = arch.conv1_geom();
    let c2 = arch.conv2_geom();
    let joined = arch.trunk_width + EXTRA_INPUTS;
    [
        c1.weight_shape().to_vec(),
        vec![c1.out_channels],
        c2.weight_shape().to_vec(),
        vec![c2.out_channels],
        vec![arch.trunk_width, c2.out_features()],
        vec![arch.trunk_width],
        vec![arch.hidden, joined],
        vec![arch.hidden],
        vec![outputs, arch.hidden],
        vec![outputs],
    ]
}

/// Rows of a `rows x cols` matrix made orthonormal (or columns when
/// `rows > cols`), then scaled by `gain`.
pub fn orthogonal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, gain: f64) -> Vec<f64> {
    let (n, m) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(b).for_each(|(a, b)| *a -= p * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = gain
                * if rows <= cols {
                    basis[r][c]
                } else {
                    basis[c][r]
                };
        }
    }
    out
}

impl ActorCritic {
    /// Registers freshly initialized actor and critic weights in `store`.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, arch: &ArchConfig, rng: &mut R) -> Result<Self, NnError> {
        arch.validate()?;
        let hidden_gain = 2f64.sqrt();
        for (prefix, outputs, out_gain) in [("actor", ACTION_DIM, 0.01), ("critic", 1, 1.0)] {
            let names = tower_names(prefix);
            let shapes = tower_shapes(arch, outputs);
            for (i, (name, shape)) in names.iter().zip(&shapes).enumerate() {
                let value = if i % 2 == 1 {
                    vec![0.0; shape[0]]
                } else {
                    let rows = shape[0];
                    let cols: usize = shape[1..].iter().product();
                    let gain = if i == 8 { out_gain } else { hidden_gain };
                    orthogonal(rng, rows, cols, gain)
                };
                store.add(name, shape, value)?;
            }
        }
        store.add("actor.log_std", &[ACTION_DIM], vec![arch.init_log_std; ACTION_DIM])?;
        Self::bind(store, arch)
    }

    /// All-zero weights; useful as a fixed reference network.
    pub fn zeros(store: &mut ParamStore, arch: &ArchConfig) -> Result<Self, NnError> {
        arch.validate()?;
        for (prefix, outputs) in [("actor", ACTION_DIM), ("critic", 1)] {
            for (name, shape) in tower_names(prefix).iter().zip(tower_shapes(arch, outputs)) {
                let n = shape.iter().product();
                store.add(name, &shape, vec![0.0; n])?;
            }
        }
        store.add("actor.log_std", &[ACTION_DIM], vec![0.0; ACTION_DIM])?;
        Self::bind(store, arch)
    }

    /// Resolves parameter handles, checking every shape against `arch`.
    pub fn bind(store: &ParamStore, arch: &ArchConfig) -> Result<Self, NnError> {
        arch.validate()?;
        let tower = |prefix: &str, outputs: usize| -> Result<Tower, NnError> {
            let names = tower_names(prefix);
            let shapes = tower_shapes(arch, outputs);
            let id = |i: usize| store.expect(&names[i], &shapes[i]);
            Ok(Tower {
                conv1_w: id(0)?,
                conv1_b: id(1)?,
                conv2_w: id(2)?,
                conv2_b: id(3)?,
                fc_w: id(4)?,
                fc_b: id(5)?,
                hidden_w: id(6)?,
                hidden_b: id(7)?,
                out_w: id(8)?,
                out_b: id(9)?,
            })
        };
        Ok(Self {
            arch: arch.clone(),
            actor: tower("actor", ACTION_DIM)?,
            critic: tower("critic", 1)?,
            log_std: store.expect("actor.log_std", &[ACTION_DIM])?,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn log_std_id(&self) -> ParamId {
        self.log_std
    }

    fn tower_ids(t: &Tower) -> [ParamId; 10] {
        [
            t.conv1_w, t.conv1_b, t.conv2_w, t.conv2_b, t.fc_w, t.fc_b, t.hidden_w, t.hidden_b, t.out_w, t.out_b,
        ]
    }

    pub fn actor_ids(&self) -> Vec<ParamId> {
        let mut v = Self::tower_ids(&self.actor).to_vec();
        v.push(self.log_std);
        v
    }

    pub fn critic_ids(&self) -> Vec<ParamId> {
        Self::tower_ids(&self.critic).to_vec()
    }

    fn trunk(&self, g: &mut Graph, t: &Tower, scans: Var) -> Result<Var, NnError> {
        let slope = self.arch.leaky_slope;
        let h = g.conv1d(scans, t.conv1_w, t.conv1_b, self.arch.conv1_geom())?;
        let h = g.leaky_relu(h, slope);
        let h = g.conv1d(h, t.conv2_w, t.conv2_b, self.arch.conv2_geom())?;
        let h = g.leaky_relu(h, slope);
        let h = g.linear(h, t.fc_w, t.fc_b)?;
        Ok(g.leaky_relu(h, slope))
    }

    fn head(&self, g: &mut Graph, t: &Tower, trunk: Var, extras: Var) -> Result<Var, NnError> {
        let joined = g.concat(&[trunk, extras])?;
        let h = g.linear(joined, t.hidden_w, t.hidden_b)?;
        let h = g.leaky_relu(h, self.arch.leaky_slope);
        g.linear(h, t.out_w, t.out_b)
    }

    /// `[B, frames*beams] -> [B, trunk_width]` through the actor convolutions.
    pub fn actor_trunk(&self, g: &mut Graph, scans: Var) -> Result<Var, NnError> {
        self.trunk(g, &self.actor, scans)
    }

    pub fn critic_trunk(&self, g: &mut Graph, scans: Var) -> Result<Var, NnError> {
        self.trunk(g, &self.critic, scans)
    }

    /// Gaussian means `[B, 2]` from trunk features and extras of equal row count.
    pub fn actor_mean(&self, g: &mut Graph, trunk: Var, extras: Var) -> Result<Var, NnError> {
        self.head(g, &self.actor, trunk, extras)
    }

    pub fn critic_value(&self, g: &mut Graph, trunk: Var, extras: Var) -> Result<Var, NnError> {
        self.head(g, &self.critic, trunk, extras)
    }

    /// Clamped log standard deviation as a `1 x 2` node.
    pub fn log_std(&self, g: &mut Graph) -> Var {
        let p = g.param(self.log_std);
        g.clamp(p, LOG_STD_MIN, LOG_STD_MAX)
    }

    pub fn log_std_values(&self, store: &ParamStore) -> [f64; ACTION_DIM] {
        let v = store.value(self.log_std);
        std::array::from_fn(|d| v[d].clamp(LOG_STD_MIN, LOG_STD_MAX))
    }

    /// Keeps the stored log standard deviation inside its allowed band.
    pub fn project(&self, store: &mut ParamStore) {
        for v in store.value_mut(self.log_std) {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    pub fn scans_tensor(&self, inputs: &[&[f64]]) -> Result<Tensor, NnError> {
        let n = self.arch.scan_features();
        let mut data = Vec::with_capacity(n * inputs.len());
        for s in inputs {
            if s.len() != n {
                return Err(NnError::Shape(format!("scan input has {} values, need {n}", s.len())));
            }
            data.extend_from_slice(s);
        }
        Ok(Tensor::new(inputs.len(), n, data))
    }

    /// Single-sample forward pass of both towers.
    pub fn forward(&self, store: &ParamStore, input: &NetInput) -> Result<(GaussianHead, f64), NnError> {
        let mut g = Graph::new(store);
        let scans = g.input(self.scans_tensor(&[&input.scans])?);
        let extras = g.input(Tensor::new(1, EXTRA_INPUTS, input.extras.to_vec()));
        let at = self.actor_trunk(&mut g, scans)?;
        let mean = self.actor_mean(&mut g, at, extras)?;
        let ct = self.critic_trunk(&mut g, scans)?;
        let value = self.critic_value(&mut g, ct, extras)?;
        let m = g.value(mean);
        let head = GaussianHead {
            mean: [m.data[0], m.data[1]],
            log_std: self.log_std_values(store),
        };
        Ok((head, g.value(value).scalar()))
    }
}
