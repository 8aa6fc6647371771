//! Named parameter storage, adaptive-moment updates and the checkpoint codec.
//!
//! Checkpoint layout (all integers and reals little-endian):
//!
//! ```text
//! magic      8 bytes   "RLPGCKPT"
//! version    u32       1
//! adam_step  u64
//! count      u32       number of parameter records
//! record * count:
//!   name_len u32, name (utf-8)
//!   ndim     u32, dims u64 * ndim
//!   moments  u8        1 if optimizer moments follow the values
//!   values   f64 * prod(dims)
//!   m, v     f64 * prod(dims) each, only when moments == 1
//! ```

use super::NnError;
use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RLPGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`]; untouched params keep an
/// empty slot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    slots: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn new(n_params: usize) -> Self {
        Self {
            slots: vec![Vec::new(); n_params],
        }
    }

    pub(crate) fn slot_mut(&mut self, id: ParamId, len: usize) -> &mut [f64] {
        let s = &mut self.slots[id.0];
        if s.is_empty() {
            s.resize(len, 0.0);
        }
        s
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        let s = &self.slots[id.0];
        (!s.is_empty()).then_some(s.as_slice())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            if theirs.is_empty() {
                continue;
            }
            if mine.is_empty() {
                mine.clone_from(theirs);
            } else {
                mine.iter_mut().zip(theirs).for_each(|(a, b)| *a += b);
            }
        }
    }

    /// Euclidean norm over the given parameters.
    pub fn norm_of(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|&id| self.get(id))
            .flat_map(|s| s.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, ids: &[ParamId], factor: f64) {
        for id in ids {
            self.slots[id.0].iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Name of the first parameter with a non-finite gradient entry.
    pub fn first_non_finite<'a>(&self, store: &'a ParamStore) -> Option<&'a str> {
        self.slots
            .iter()
            .enumerate()
            .find(|(_, s)| s.iter().any(|g| !g.is_finite()))
            .map(|(i, _)| store.params[i].name.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
    adam_step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], value: Vec<f64>) -> Result<ParamId, NnError> {
        let len: usize = shape.iter().product();
        if value.len() != len {
            return Err(NnError::Shape(format!(
                "{name}: {} values for shape {shape:?}",
                value.len()
            )));
        }
        if self.by_name.contains_key(name) {
            return Err(NnError::Config(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_owned(),
            shape: shape.to_vec(),
            grad: vec![0.0; len],
            m: vec![0.0; len],
            v: vec![0.0; len],
            value,
        });
        self.by_name.insert(name.to_owned(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Looks up `name` and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<ParamId, NnError> {
        let id = self
            .id(name)
            .ok_or_else(|| NnError::Config(format!("missing parameter {name}")))?;
        let got = &self.params[id.0].shape;
        if got != shape {
            return Err(NnError::Config(format!(
                "parameter {name} has shape {got:?}, architecture needs {shape:?}"
            )));
        }
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].value
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn adam_step_count(&self) -> u64 {
        self.adam_step
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `grads` into the stored gradient arrays.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<(), NnError> {
        if let Some(name) = grads.first_non_finite(self) {
            return Err(NnError::NonFiniteGradient(name.to_owned()));
        }
        for (p, g) in self.params.iter_mut().zip(&grads.slots) {
            if !g.is_empty() {
                p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }

    /// One adaptive-moment update from the stored gradients, which are then
    /// cleared.
    pub fn adam_step(&mut self, lr: f64, cfg: &AdamConfig) {
        self.adam_step += 1;
        let t = self.adam_step as f64;
        let c1 = 1.0 - cfg.beta1.powf(t);
        let c2 = 1.0 - cfg.beta2.powf(t);
        for p in &mut self.params {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = p.m[i] / c1;
                let vhat = p.v[i] / c2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
                p.grad[i] = 0.0;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.adam_step.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
            for &d in &p.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&[1u8])?;
            for arr in [&p.value, &p.m, &p.v] {
                for x in arr.iter() {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, NnError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let adam_step = read_u64(&mut r)?;
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| NnError::Checkpoint("parameter name is not utf-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let len: usize = shape.iter().product();
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let value = read_f64s(&mut r, len)?;
            let id = store.add(&name, &shape, value)?;
            if flag[0] == 1 {
                let p = &mut store.params[id.0];
                p.m = read_f64s(&mut r, len)?;
                p.v = read_f64s(&mut r, len)?;
            }
        }
        store.adam_step = adam_step;
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        let mut buf = Vec::with_capacity(8 * 3 * self.num_values() + 1024);
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<f64>> {
    let mut bytes = vec![0u8; 8 * n];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}
