//! A small reverse-mode tape over row-major 2-D tensors.
//!
//! Every tensor is `rows x cols`; rows are batch samples. Layer ops read their
//! weights straight from the bound [`ParamStore`] and write weight gradients
//! into a [`Gradients`] buffer on [`Graph::backward`].

use super::params::{Gradients, ParamId, ParamStore};
use super::NnError;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scalar(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "not a scalar");
        self.data[0]
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Shape of a strided 1-D convolution over `in_channels` signals of `length`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub length: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_length(&self) -> usize {
        (self.length - self.kernel) / self.stride + 1
    }

    pub fn in_features(&self) -> usize {
        self.in_channels * self.length
    }

    pub fn out_features(&self) -> usize {
        self.out_channels * self.out_length()
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [self.out_channels, self.in_channels, self.kernel]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: ParamId, b: ParamId },
    Conv1d { x: Var, w: ParamId, b: ParamId, geom: ConvGeom },
    LeakyRelu { x: Var, slope: f64 },
    Concat(Vec<Var>),
    RepeatRows { x: Var, times: usize },
    GroupSumRows { x: Var, group: usize },
    BroadcastRows { x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Scale { x: Var, c: f64 },
    Offset { x: Var },
    Exp(Var),
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    SumCols(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation against a read-only parameter store.
#[derive(Debug)]
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let k = 4 * i;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(64),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn wants_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A whole parameter as a `1 x len` tensor.
    pub fn param(&mut self, id: ParamId) -> Var {
        let vals = self.store.value(id).to_vec();
        let n = vals.len();
        self.push(Tensor::new(1, n, vals), Op::Param(id))
    }

    /// `x [B, in] -> [B, out]` with weight `[out, in]` and bias `[out]`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var, NnError> {
        let wp = self.store.param(w);
        let bias = self.store.value(b);
        let (out_dim, in_dim) = match wp.shape.as_slice() {
            [o, i] => (*o, *i),
            s => return Err(NnError::Shape(format!("{}: linear weight shape {s:?}", wp.name))),
        };
        let xv = self.value(x);
        if xv.cols != in_dim || bias.len() != out_dim {
            return Err(NnError::Shape(format!(
                "{}: input has {} features, layer expects {in_dim}",
                wp.name, xv.cols
            )));
        }
        let mut out = Tensor::zeros(xv.rows, out_dim);
        for r in 0..xv.rows {
            let xr = xv.row(r);
            let orow = out.row_mut(r);
            for o in 0..out_dim {
                orow[o] = bias[o] + dot(&wp.value[o * in_dim..(o + 1) * in_dim], xr);
            }
        }
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn conv1d(&mut self, x: Var, w: ParamId, b: ParamId, geom: ConvGeom) -> Result<Var, NnError> {
        let wp = self.store.param(w);
        if wp.shape != geom.weight_shape() || self.store.value(b).len() != geom.out_channels {
            return Err(NnError::Shape(format!("{}: conv weight shape {:?}", wp.name, wp.shape)));
        }
        let xv = self.value(x);
        if xv.cols != geom.in_features() {
            return Err(NnError::Shape(format!(
                "{}: input has {} features, conv expects {}",
                wp.name,
                xv.cols,
                geom.in_features()
            )));
        }
        let bias = self.store.value(b);
        let ol = geom.out_length();
        let k = geom.kernel;
        let mut out = Tensor::zeros(xv.rows, geom.out_features());
        for r in 0..xv.rows {
            let xr = xv.row(r);
            let orow = out.row_mut(r);
            for co in 0..geom.out_channels {
                let dst = &mut orow[co * ol..(co + 1) * ol];
                dst.fill(bias[co]);
                for ci in 0..geom.in_channels {
                    let wk = &wp.value[(co * geom.in_channels + ci) * k..][..k];
                    let xc = &xr[ci * geom.length..(ci + 1) * geom.length];
                    for (t, d) in dst.iter_mut().enumerate() {
                        let start = t * geom.stride;
                        *d += dot(wk, &xc[start..start + k]);
                    }
                }
            }
        }
        Ok(self.push(out, Op::Conv1d { x, w, b, geom }))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.rows, xv.cols, xv.data.iter().map(|&v| f(v)).collect());
        self.push(out, op)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu { x, slope })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| c * v, Op::Scale { x, c })
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::Offset { x })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(NnError::Shape(format!(
                "elementwise op on {}x{} and {}x{}",
                av.rows, av.cols, bv.rows, bv.cols
            )));
        }
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.rows, av.cols, data);
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip(a, b, f64::min, Op::Min(a, b))
    }

    /// Joins tensors with equal row counts side by side.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let rows = self.value(parts[0]).rows;
        if parts.iter().any(|&p| self.value(p).rows != rows) {
            return Err(NnError::Shape("concat of tensors with different row counts".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Tensor::new(rows, cols, data), Op::Concat(parts.to_vec())))
    }

    /// Row `r` of the input becomes rows `r*times .. (r+1)*times` of the output.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.data.len() * times);
        for r in 0..xv.rows {
            for _ in 0..times {
                data.extend_from_slice(xv.row(r));
            }
        }
        let out = Tensor::new(xv.rows * times, xv.cols, data);
        self.push(out, Op::RepeatRows { x, times })
    }

    /// Sums consecutive groups of `group` rows.
    pub fn group_sum_rows(&mut self, x: Var, group: usize) -> Result<Var, NnError> {
        let xv = self.value(x);
        if group == 0 || xv.rows % group != 0 {
            return Err(NnError::Shape(format!("{} rows do not split into groups of {group}", xv.rows)));
        }
        let mut out = Tensor::zeros(xv.rows / group, xv.cols);
        for r in 0..xv.rows {
            axpy(1.0, xv.row(r), out.row_mut(r / group));
        }
        Ok(self.push(out, Op::GroupSumRows { x, group }))
    }

    /// Copies a single-row tensor `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var, NnError> {
        let xv = self.value(x);
        if xv.rows != 1 {
            return Err(NnError::Shape("broadcast_rows needs a single row".into()));
        }
        let out = Tensor::new(rows, xv.cols, xv.data.repeat(rows));
        Ok(self.push(out, Op::BroadcastRows { x }))
    }

    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows).map(|r| xv.row(r).iter().sum()).collect();
        let out = Tensor::new(xv.rows, 1, data);
        self.push(out, Op::SumCols(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::new(1, 1, vec![s]), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data.iter().sum::<f64>() / xv.data.len() as f64;
        self.push(Tensor::new(1, 1, vec![s]), Op::Mean(x))
    }

    /// Reverse sweep from a scalar node. Returns gradients for every
    /// parameter that influenced `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let lv = self.value(loss);
        if lv.data.len() != 1 {
            return Err(NnError::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(1, 1, vec![1.0]));
        let mut out = Gradients::new(self.store.len());

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let slot = out.slot_mut(*id, gy.data.len());
                    axpy(1.0, &gy.data, slot);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.store.value(*w);
                    let (out_dim, in_dim) = (gy.cols, xv.cols);
                    let want_gx = self.wants_grad(*x);
                    let mut gx = Tensor::zeros(if want_gx { xv.rows } else { 0 }, in_dim);
                    {
                        let gw = out.slot_mut(*w, out_dim * in_dim);
                        for r in 0..xv.rows {
                            let gyr = gy.row(r);
                            let xr = xv.row(r);
                            let gxr: &mut [f64] = if want_gx { gx.row_mut(r) } else { &mut [] };
                            for (o, &g) in gyr.iter().enumerate() {
                                if g == 0.0 {
                                    continue;
                                }
                                if want_gx {
                                    axpy(g, &wv[o * in_dim..(o + 1) * in_dim], gxr);
                                }
                                axpy(g, xr, &mut gw[o * in_dim..(o + 1) * in_dim]);
                            }
                        }
                    }
                    let gb = out.slot_mut(*b, out_dim);
                    for r in 0..gy.rows {
                        axpy(1.0, gy.row(r), gb);
                    }
                    if want_gx {
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Conv1d { x, w, b, geom } => {
                    let xv = self.value(*x);
                    let wv = self.store.value(*w);
                    let ol = geom.out_length();
                    let k = geom.kernel;
                    let want_gx = self.wants_grad(*x);
                    let mut gx = Tensor::zeros(if want_gx { xv.rows } else { 0 }, xv.cols);
                    {
                        let gw = out.slot_mut(*w, wv.len());
                        for r in 0..xv.rows {
                            let xr = xv.row(r);
                            let gyr = gy.row(r);
                            let gxr: &mut [f64] = if want_gx { gx.row_mut(r) } else { &mut [] };
                            for co in 0..geom.out_channels {
                                let gyc = &gyr[co * ol..(co + 1) * ol];
                                for ci in 0..geom.in_channels {
                                    let woff = (co * geom.in_channels + ci) * k;
                                    let xoff = ci * geom.length;
                                    for (t, &g) in gyc.iter().enumerate() {
                                        if g == 0.0 {
                                            continue;
                                        }
                                        let s = xoff + t * geom.stride;
                                        axpy(g, &xr[s..s + k], &mut gw[woff..woff + k]);
                                        if want_gx {
                                            axpy(g, &wv[woff..woff + k], &mut gxr[s..s + k]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let gb = out.slot_mut(*b, geom.out_channels);
                    for r in 0..gy.rows {
                        let gyr = gy.row(r);
                        for (co, g) in gb.iter_mut().enumerate() {
                            *g += gyr[co * ol..(co + 1) * ol].iter().sum::<f64>();
                        }
                    }
                    if want_gx {
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x);
                    let g = elementwise(&gy, xv, |g, v| if v > 0.0 { g } else { g * slope });
                    accumulate(&mut grads, *x, g);
                }
                Op::Concat(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let pc = self.value(p).cols;
                        let mut gp = Tensor::zeros(gy.rows, pc);
                        for r in 0..gy.rows {
                            gp.row_mut(r).copy_from_slice(&gy.row(r)[col..col + pc]);
                        }
                        col += pc;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::RepeatRows { x, times } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..gy.rows {
                        axpy(1.0, gy.row(r), gx.row_mut(r / times));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GroupSumRows { x, group } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        gx.row_mut(r).copy_from_slice(gy.row(r / group));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::BroadcastRows { x } => {
                    let mut gx = Tensor::zeros(1, gy.cols);
                    for r in 0..gy.rows {
                        axpy(1.0, gy.row(r), &mut gx.data);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, gy.clone());
                    accumulate(&mut grads, *b, gy);
                }
                Op::Sub(a, b) => {
                    let neg = Tensor::new(gy.rows, gy.cols, gy.data.iter().map(|g| -g).collect());
                    accumulate(&mut grads, *a, gy);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let ga = elementwise(&gy, self.value(*b), |g, v| g * v);
                    let gb = elementwise(&gy, self.value(*a), |g, v| g * v);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Min(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let mut ga = Tensor::zeros(gy.rows, gy.cols);
                    let mut gb = Tensor::zeros(gy.rows, gy.cols);
                    for i in 0..gy.data.len() {
                        if av.data[i] <= bv.data[i] {
                            ga.data[i] = gy.data[i];
                        } else {
                            gb.data[i] = gy.data[i];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale { x, c } => {
                    let g = Tensor::new(gy.rows, gy.cols, gy.data.iter().map(|g| g * c).collect());
                    accumulate(&mut grads, *x, g);
                }
                Op::Offset { x } => accumulate(&mut grads, *x, gy),
                Op::Exp(x) => {
                    let g = elementwise(&gy, y, |g, e| g * e);
                    accumulate(&mut grads, *x, g);
                }
                Op::Tanh(x) => {
                    let g = elementwise(&gy, y, |g, t| g * (1.0 - t * t));
                    accumulate(&mut grads, *x, g);
                }
                Op::Sigmoid(x) => {
                    let g = elementwise(&gy, y, |g, s| g * s * (1.0 - s));
                    accumulate(&mut grads, *x, g);
                }
                Op::Square(x) => {
                    let g = elementwise(&gy, self.value(*x), |g, v| 2.0 * g * v);
                    accumulate(&mut grads, *x, g);
                }
                Op::Clamp { x, lo, hi } => {
                    let g = elementwise(&gy, self.value(*x), |g, v| {
                        if v >= *lo && v <= *hi {
                            g
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *x, g);
                }
                Op::SumCols(x) => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        gx.row_mut(r).fill(gy.data[r]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    let gx = Tensor::new(xv.rows, xv.cols, vec![gy.data[0]; xv.data.len()]);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let n = xv.data.len() as f64;
                    let gx = Tensor::new(xv.rows, xv.cols, vec![gy.data[0] / n; xv.data.len()]);
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        if let Some(name) = out.first_non_finite(self.store) {
            return Err(NnError::NonFiniteGradient(name.to_owned()));
        }
        Ok(out)
    }
}

fn elementwise(gy: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = gy.data.iter().zip(&other.data).map(|(&g, &v)| f(g, v)).collect();
    Tensor::new(gy.rows, gy.cols, data)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => axpy(1.0, &g.data, &mut existing.data),
        slot @ None => *slot = Some(g),
    }
}
