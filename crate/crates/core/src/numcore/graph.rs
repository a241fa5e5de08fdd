//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op in execution order together with its output
//! value. [`Graph::backward`] walks the tape in reverse, so each node is
//! visited exactly once and gradients reaching a node from several consumers
//! are summed before they are propagated further.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, gemm, gemm_nt, gemm_tn};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{bail, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a user-supplied op.
///
/// Receives the input values, the output value and the output gradient, and
/// returns one gradient per input.
const SQRT_FLOOR: f32 = 1e-12;

pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f32),
    MulConst(Var, Vec<f32>),
    ScaleRows(Var, Vec<f32>),
    Gelu(Var),
    Relu(Var),
    Softplus(Var),
    Sqrt(Var),
    Softmax { x: Var, outer: usize, axis_len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32>, train: bool },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    Narrow { x: Var, axis: usize, start: usize },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<f32> },
    PairwiseSqDist(Var),
    GatherFlat { x: Var, idx: Vec<usize> },
    Custom { inputs: Vec<Var>, backward: CustomBackward },
}

struct Node {
    value: Tensor,
    /// Unrounded value of scalar reductions and of scalar arithmetic on them.
    exact: Option<f64>,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics recorded by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance.
    pub var: Vec<f32>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
    batch_stats: Vec<(Var, BatchStats)>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Dimension, "{op}: shape {:?} vs {:?}", a.shape(), b.shape());
    }
    Ok(())
}

#[inline]
fn sq(x: f64) -> f64 {
    x * x
}

fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * core::f32::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f32) -> f32 {
    let cdf = 0.5 * (1.0 + libm::erff(x * core::f32::consts::FRAC_1_SQRT_2));
    let pdf = libm::expf(-0.5 * x * x) * 0.398_942_3;
    cdf + x * pdf
}

fn softplus_scalar(x: f32) -> f32 {
    x.max(0.0) + libm::log1pf(libm::expf(-libm::fabsf(x)))
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::expf(-x))
    } else {
        let e = libm::expf(x);
        e / (1.0 + e)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f32], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    if rank == 0 {
        return (out_shape, data.to_vec());
    }
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let (last_len, last_stride) = (out_shape[last], src_strides[last]);
    let mut base = 0usize;
    while out.len() < n {
        for j in 0..last_len {
            out.push(data[base + j * last_stride]);
        }
        // odometer over the leading axes
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

/// Offsets of a narrowed view: `(outer, axis_len, inner)` decomposition.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, exact: None, op, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, value: f64, op: Op, requires_grad: bool) -> Var {
        let v = self.push(Tensor::scalar(value as f32), op, requires_grad);
        self.nodes[v.0].exact = Some(value);
        v
    }

    /// Scalar value carried in `f64` through reductions, sums, differences,
    /// products and scalings of scalars; other nodes widen their `f32`.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.exact.unwrap_or_else(|| n.value.data().first().copied().unwrap_or(0.0) as f64)
    }

    fn both_scalar(&self, a: Var, b: Var) -> Option<(f64, f64)> {
        let scalar = |v: Var| self.nodes[v.0].value.shape().is_empty();
        (scalar(a) && scalar(b)).then(|| (self.scalar_value(a), self.scalar_value(b)))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated on a leaf or parameter node by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn batch_stats(&self, v: Var) -> Option<&BatchStats> {
        self.batch_stats.iter().find(|(w, _)| *w == v).map(|(_, s)| s)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Binds a stored parameter; its gradient is routed back by
    /// [`Graph::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    /// Adds parameter-node gradients into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (node, g) in self.nodes.iter().zip(&self.leaf_grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.accumulate_grad(*id, g.data())?;
            }
        }
        Ok(())
    }

    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if !self.value(v).all_finite() {
            bail!(Numeric, "{what}: non-finite values");
        }
        Ok(())
    }

    // ---- linear algebra ----

    /// `x[..., K] · w[K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 || av.rank() == 0 || av.cols() != bv.shape()[0] {
            bail!(Dimension, "matmul: {:?} · {:?}", av.shape(), bv.shape());
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(av.data(), bv.data(), &mut out, m, k, n, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), rg))
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            bail!(Dimension, "bmm: {:?} · {:?}", av.shape(), bv.shape());
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, n) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if bk != k {
            bail!(Dimension, "bmm inner extent: {:?} · {:?} (trans_b={trans_b})", av.shape(), bv.shape());
        }
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ab = &av.data()[bi * m * k..(bi + 1) * m * k];
            let bb = &bv.data()[bi * k * n..(bi + 1) * k * n];
            let ob = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                gemm_nt(ab, bb, ob, m, k, n, false);
            } else {
                gemm(ab, bb, ob, m, k, n, false);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[batch, m, n], out)?, Op::Bmm { a, b, trans_b }, rg))
    }

    /// Batched `a[B,M,K] · b[B,K,N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// Batched `a[B,M,K] · b[B,N,K]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    // ---- elementwise ----

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f32, f32) -> f32) -> Result<Vec<f32>> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        Ok(av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let t = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(a) || self.rg(b);
        if let Some((x, y)) = self.both_scalar(a, b) {
            return Ok(self.push_scalar(x + y, Op::Add(a, b), rg));
        }
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let t = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(a) || self.rg(b);
        if let Some((x, y)) = self.both_scalar(a, b) {
            return Ok(self.push_scalar(x - y, Op::Sub(a, b), rg));
        }
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let t = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(a) || self.rg(b);
        if let Some((x, y)) = self.both_scalar(a, b) {
            return Ok(self.push_scalar(x * y, Op::Mul(a, b), rg));
        }
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `x[..., N] + b[N]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            bail!(Dimension, "add_bias: {:?} + {:?}", xv.shape(), bv.shape());
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(bv.len().max(1)) {
            kernels::add_assign(row, bv.data());
        }
        let t = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddBias(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape(), xv.data().iter().map(|v| v * c).collect())?;
        let rg = self.rg(x);
        if t.shape().is_empty() {
            let exact = self.scalar_value(x) * c as f64;
            return Ok(self.push_scalar(exact, Op::Scale(x, c), rg));
        }
        Ok(self.push(t, Op::Scale(x, c), rg))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Vec<f32>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            bail!(Dimension, "mul_const: mask of {} for {:?}", mask.len(), xv.shape());
        }
        let t = Tensor::new(xv.shape(), xv.data().iter().zip(&mask).map(|(a, b)| a * b).collect())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MulConst(x, mask), rg))
    }

    /// Scales contiguous row blocks: `x` is viewed as `[scales.len(), -1]`.
    pub fn scale_rows(&mut self, x: Var, scales: Vec<f32>) -> Result<Var> {
        let xv = self.value(x);
        if scales.is_empty() || xv.len() % scales.len() != 0 {
            bail!(Dimension, "scale_rows: {} scales for {:?}", scales.len(), xv.shape());
        }
        let block = xv.len() / scales.len();
        let mut out = xv.data().to_vec();
        for (chunk, &s) in out.chunks_exact_mut(block.max(1)).zip(&scales) {
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        let t = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::ScaleRows(x, scales), rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape(), xv.data().iter().map(|&v| f(v)).collect())?;
        let rg = self.rg(x);
        Ok(self.push(t, op, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gelu(x), gelu_scalar)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Softplus(x), softplus_scalar)
    }

    /// `sqrt(max(x, 1e-12))`; the gradient is zero below the clamp.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sqrt(x), |v| libm::sqrtf(v.max(SQRT_FLOOR)))
    }

    // ---- normalisation ----

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            bail!(Dimension, "softmax axis {axis} for {:?}", xv.shape());
        }
        if !xv.all_finite() {
            bail!(Numeric, "softmax input contains NaN or Inf");
        }
        let (outer, axis_len, inner) = axis_split(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut max = f32::NEG_INFINITY;
                for a in 0..axis_len {
                    max = max.max(src[base + a * inner]);
                }
                let mut denom = 0.0f64;
                for a in 0..axis_len {
                    let e = libm::expf(src[base + a * inner] - max);
                    out[base + a * inner] = e;
                    denom += e as f64;
                }
                let inv = (1.0 / denom) as f32;
                for a in 0..axis_len {
                    out[base + a * inner] *= inv;
                }
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, outer, axis_len, inner }, rg))
    }

    /// Layer norm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        if eps <= 0.0 {
            bail!(Contract, "layer_norm eps must be positive");
        }
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            bail!(Dimension, "layer_norm affine size vs {:?}", xv.shape());
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = kernels::sum64(row) / d as f64;
            let var = row.iter().map(|&v| sq(v as f64 - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / libm::sqrt(var + eps as f64);
            rstd[r] = rs as f32;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = ((v as f64 - mean) * rs) as f32;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(d) {
            for ((o, &gi), &bi) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Batch norm over rows of `x[B, D]`.
    ///
    /// Train mode normalises with batch statistics and records them (see
    /// [`Graph::batch_stats`]); eval mode uses `running = (mean, var)`.
    pub fn batch_norm_1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[f32], &[f32]),
        train: bool,
        eps: f32,
    ) -> Result<Var> {
        if eps <= 0.0 {
            bail!(Contract, "batch_norm eps must be positive");
        }
        let xv = self.value(x);
        if xv.rank() != 2 {
            bail!(Dimension, "batch_norm_1d expects [B, D], got {:?}", xv.shape());
        }
        let (bsz, d) = (xv.shape()[0], xv.shape()[1]);
        if train && bsz < 2 {
            bail!(Contract, "batch_norm in train mode needs batch size >= 2, got {bsz}");
        }
        if running.0.len() != d || running.1.len() != d || self.value(gamma).len() != d || self.value(beta).len() != d {
            bail!(Dimension, "batch_norm parameter extents vs D={d}");
        }
        let src = xv.data();
        let mut mean = vec![0.0f64; d];
        let mut var = vec![0.0f64; d];
        let mut stats = None;
        if train {
            for r in 0..bsz {
                for c in 0..d {
                    mean[c] += src[r * d + c] as f64;
                }
            }
            mean.iter_mut().for_each(|m| *m /= bsz as f64);
            for r in 0..bsz {
                for c in 0..d {
                    var[c] += sq(src[r * d + c] as f64 - mean[c]);
                }
            }
            let unbiased = var.iter().map(|v| (v / (bsz - 1) as f64) as f32).collect();
            var.iter_mut().for_each(|v| *v /= bsz as f64);
            stats = Some(BatchStats { mean: mean.iter().map(|&m| m as f32).collect(), var: unbiased });
        } else {
            for c in 0..d {
                mean[c] = running.0[c] as f64;
                var[c] = running.1[c] as f64;
            }
        }
        let rstd: Vec<f32> = var.iter().map(|v| (1.0 / libm::sqrt(v + eps as f64)) as f32).collect();
        let mut xhat = vec![0.0; src.len()];
        for r in 0..bsz {
            for c in 0..d {
                xhat[r * d + c] = ((src[r * d + c] as f64 - mean[c]) * rstd[c] as f64) as f32;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(d) {
            for ((o, &gi), &bi) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        let t = Tensor::new(&[bsz, d], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(t, Op::BatchNorm { x, gamma, beta, xhat, rstd, train }, rg);
        if let Some(s) = stats {
            self.batch_stats.push((v, s));
        }
        Ok(v)
    }

    // ---- indexing and layout ----

    /// Selects rows of `x` (viewed as `[R, C]` over its first axis).
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            bail!(Dimension, "gather_rows on a scalar");
        }
        let r = xv.shape()[0];
        let c = xv.len() / r.max(1);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            if i >= r {
                bail!(Index, "gather_rows index {i} >= {r}");
            }
            out.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = idx.len();
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GatherRows { x, idx }, rg))
    }

    /// Concatenates along the first axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            bail!(Dimension, "concat_rows of nothing");
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let xv = self.value(x);
            if xv.shape()[1..] != tail[..] {
                bail!(Dimension, "concat_rows: {:?} vs tail {:?}", xv.shape(), tail);
            }
            rows += xv.shape()[0];
            out.extend_from_slice(xv.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let t = Tensor::new(&shape, out)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(t, Op::ConcatRows(xs.to_vec()), rg))
    }

    /// Slice `[start, start+len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || start + len > xv.shape()[axis] {
            bail!(Dimension, "narrow axis {axis} [{start}, {}) of {:?}", start + len, xv.shape());
        }
        let (outer, axis_len, inner) = axis_split(xv.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Narrow { x, axis, start }, rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut seen = vec![false; xv.rank()];
        if axes.len() != xv.rank() {
            bail!(Dimension, "permute {:?} of {:?}", axes, xv.shape());
        }
        for &a in axes {
            if a >= xv.rank() || seen[a] {
                bail!(Dimension, "permute axes {:?} are not a permutation", axes);
            }
            seen[a] = true;
        }
        let (shape, out) = permute_data(xv.data(), xv.shape(), axes);
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Picks single elements by flat index.
    pub fn gather_flat(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len());
        for &i in &idx {
            if i >= xv.len() {
                bail!(Index, "gather_flat index {i} >= {}", xv.len());
            }
            out.push(xv.data()[i]);
        }
        let t = Tensor::new(&[idx.len()], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GatherFlat { x, idx }, rg))
    }

    // ---- reductions and losses ----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        Ok(self.push_scalar(s, Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            bail!(Dimension, "mean of an empty tensor");
        }
        let s = xv.sum() / xv.len() as f64;
        let rg = self.rg(x);
        Ok(self.push_scalar(s, Op::Mean(x), rg))
    }

    /// Mean cross-entropy of `logits[B, C]` against `labels`, with targets
    /// `(1-eps)·onehot + eps/C`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], eps: f32) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            bail!(Dimension, "cross_entropy: logits {:?} for {} labels", lv.shape(), labels.len());
        }
        if !(0.0..1.0).contains(&eps) {
            bail!(Contract, "label smoothing eps {eps} outside [0, 1)");
        }
        if !lv.all_finite() {
            bail!(Numeric, "cross_entropy logits contain NaN or Inf");
        }
        let (b, c) = (lv.shape()[0], lv.shape()[1]);
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0f64;
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                bail!(Contract, "label {label} out of range for {c} classes");
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let denom: f64 = row.iter().map(|&v| libm::exp((v - max) as f64)).sum();
            let lse = max as f64 + libm::log(denom);
            let mut loss = 0.0f64;
            for (j, &v) in row.iter().enumerate() {
                let logp = v as f64 - lse;
                probs[r * c + j] = libm::exp(logp) as f32;
                let t = if j == label { 1.0 - eps as f64 } else { 0.0 } + eps as f64 / c as f64;
                if t != 0.0 {
                    loss -= t * logp;
                }
            }
            total += loss;
        }
        // the backward only needs (p - t) / B; keep it instead of raw probs
        for (r, &label) in labels.iter().enumerate() {
            for j in 0..c {
                let t = if j == label { 1.0 - eps } else { 0.0 } + eps / c as f32;
                probs[r * c + j] = (probs[r * c + j] - t) / b as f32;
            }
        }
        let rg = self.rg(logits);
        Ok(self.push_scalar(total / b as f64, Op::CrossEntropy { logits, targets: probs }, rg))
    }

    /// Squared Euclidean distances between all rows of `x[B, D]`.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            bail!(Dimension, "pairwise_sq_dist expects [B, D], got {:?}", xv.shape());
        }
        let b = xv.shape()[0];
        let mut out = vec![0.0; b * b];
        for i in 0..b {
            for j in (i + 1)..b {
                let d: f64 = xv.row(i).iter().zip(xv.row(j)).map(|(&p, &q)| sq((p - q) as f64)).sum();
                out[i * b + j] = d as f32;
                out[j * b + i] = d as f32;
            }
        }
        let t = Tensor::new(&[b, b], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::PairwiseSqDist(x), rg))
    }

    /// Records an op whose value and vector-Jacobian product are supplied by
    /// the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        let rg = inputs.iter().any(|&x| self.rg(x));
        self.push(value, Op::Custom { inputs: inputs.to_vec(), backward }, rg)
    }

    // ---- reverse pass ----

    /// Back-propagates from a scalar `loss`; leaf gradients accumulate across
    /// calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    let shape = node.value.shape();
                    match &mut self.leaf_grads[i] {
                        Some(g) => kernels::add_assign(g.data_mut(), &gy),
                        slot => *slot = Some(Tensor::new(shape, gy)?),
                    }
                }
                op => backprop(&self.nodes, op, &node.value, &gy, &mut grads)?,
            }
        }
        Ok(())
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f32>>], v: Var) -> Option<&'a mut Vec<f32>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn acc(nodes: &[Node], grads: &mut [Option<Vec<f32>>], v: Var, g: &[f32]) {
    if let Some(s) = slot(nodes, grads, v) {
        kernels::add_assign(s, g);
    }
}

fn backprop(nodes: &[Node], op: &Op, y: &Tensor, gy: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    match op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
            if let Some(s) = slot(nodes, grads, *a) {
                gemm_nt(gy, bv.data(), s, m, n, k, true);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                gemm_tn(av.data(), gy, s, k, m, n, true);
            }
        }
        Op::Bmm { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = y.shape()[2];
            if let Some(s) = slot(nodes, grads, *a) {
                for bi in 0..batch {
                    let g = &gy[bi * m * n..(bi + 1) * m * n];
                    let bb = &bv.data()[bi * k * n..(bi + 1) * k * n];
                    let sa = &mut s[bi * m * k..(bi + 1) * m * k];
                    if *trans_b {
                        gemm(g, bb, sa, m, n, k, true);
                    } else {
                        gemm_nt(g, bb, sa, m, n, k, true);
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for bi in 0..batch {
                    let g = &gy[bi * m * n..(bi + 1) * m * n];
                    let ab = &av.data()[bi * m * k..(bi + 1) * m * k];
                    let sb = &mut s[bi * k * n..(bi + 1) * k * n];
                    if *trans_b {
                        gemm_tn(g, ab, sb, n, m, k, true);
                    } else {
                        gemm_tn(ab, g, sb, k, m, n, true);
                    }
                }
            }
        }
        Op::Add(a, b) => {
            acc(nodes, grads, *a, gy);
            acc(nodes, grads, *b, gy);
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, gy);
            if let Some(s) = slot(nodes, grads, *b) {
                s.iter_mut().zip(gy).for_each(|(d, &g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(s) = slot(nodes, grads, *a) {
                for ((d, &g), &o) in s.iter_mut().zip(gy).zip(bv) {
                    *d += g * o;
                }
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for ((d, &g), &o) in s.iter_mut().zip(gy).zip(av) {
                    *d += g * o;
                }
            }
        }
        Op::AddBias(x, b) => {
            acc(nodes, grads, *x, gy);
            if let Some(s) = slot(nodes, grads, *b) {
                let n = s.len();
                let mut col = vec![0.0f64; n];
                for row in gy.chunks_exact(n) {
                    for (c, &g) in col.iter_mut().zip(row) {
                        *c += g as f64;
                    }
                }
                s.iter_mut().zip(&col).for_each(|(d, &c)| *d += c as f32);
            }
        }
        Op::Scale(x, c) => {
            if let Some(s) = slot(nodes, grads, *x) {
                s.iter_mut().zip(gy).for_each(|(d, &g)| *d += g * c);
            }
        }
        Op::MulConst(x, mask) => {
            if let Some(s) = slot(nodes, grads, *x) {
                for ((d, &g), &m) in s.iter_mut().zip(gy).zip(mask) {
                    *d += g * m;
                }
            }
        }
        Op::ScaleRows(x, scales) => {
            if let Some(s) = slot(nodes, grads, *x) {
                let block = s.len() / scales.len();
                for ((ds, gs), &c) in s.chunks_exact_mut(block.max(1)).zip(gy.chunks_exact(block.max(1))).zip(scales) {
                    ds.iter_mut().zip(gs).for_each(|(d, &g)| *d += g * c);
                }
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x).data();
            if let Some(s) = slot(nodes, grads, *x) {
                for ((d, &g), &v) in s.iter_mut().zip(gy).zip(xv) {
                    *d += g * gelu_grad(v);
                }
            }
        }
        Op::Relu(x) => {
            let xv = val(*x).data();
            if let Some(s) = slot(nodes, grads, *x) {
                for ((d, &g), &v) in s.iter_mut().zip(gy).zip(xv) {
                    if v > 0.0 {
                        *d += g;
                    }
                }
            }
        }
        Op::Softplus(x) => {
            let xv = val(*x).data();
            if let Some(s) = slot(nodes, grads, *x) {
                for ((d, &g), &v) in s.iter_mut().zip(gy).zip(xv) {
                    *d += g * sigmoid(v);
                }
            }
        }
        Op::Sqrt(x) => {
            let (xv, yv) = (val(*x).data(), y.data());
            if let Some(s) = slot(nodes, grads, *x) {
                for (((d, &g), &v), &r) in s.iter_mut().zip(gy).zip(xv).zip(yv) {
                    if v > SQRT_FLOOR {
                        *d += g * 0.5 / r;
                    }
                }
            }
        }
        Op::Softmax { x, outer, axis_len, inner } => {
            let yv = y.data();
            if let Some(s) = slot(nodes, grads, *x) {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * axis_len * inner + i;
                        let mut dot = 0.0f64;
                        for a in 0..*axis_len {
                            let p = base + a * inner;
                            dot += gy[p] as f64 * yv[p] as f64;
                        }
                        let dot = dot as f32;
                        for a in 0..*axis_len {
                            let p = base + a * inner;
                            s[p] += yv[p] * (gy[p] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let g = val(*gamma).data();
            let d = g.len();
            if let Some(s) = slot(nodes, grads, *gamma) {
                let mut col = vec![0.0f64; d];
                for (gr, xr) in gy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for ((c, &gv), &xh) in col.iter_mut().zip(gr).zip(xr) {
                        *c += gv as f64 * xh as f64;
                    }
                }
                s.iter_mut().zip(&col).for_each(|(dst, &c)| *dst += c as f32);
            }
            if let Some(s) = slot(nodes, grads, *beta) {
                let mut col = vec![0.0f64; d];
                for gr in gy.chunks_exact(d) {
                    for (c, &gv) in col.iter_mut().zip(gr) {
                        *c += gv as f64;
                    }
                }
                s.iter_mut().zip(&col).for_each(|(dst, &c)| *dst += c as f32);
            }
            if let Some(s) = slot(nodes, grads, *x) {
                let mut dxhat = vec![0.0f32; d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &gy[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0f64;
                    let mut m2 = 0.0f64;
                    for j in 0..d {
                        dxhat[j] = gr[j] * g[j];
                        m1 += dxhat[j] as f64;
                        m2 += dxhat[j] as f64 * xr[j] as f64;
                    }
                    let (m1, m2) = ((m1 / d as f64) as f32, (m2 / d as f64) as f32);
                    for j in 0..d {
                        s[r * d + j] += rs * (dxhat[j] - m1 - xr[j] * m2);
                    }
                }
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, rstd, train } => {
            let g = val(*gamma).data();
            let d = g.len();
            let bsz = gy.len() / d;
            if let Some(s) = slot(nodes, grads, *gamma) {
                for j in 0..d {
                    let acc: f64 = (0..bsz).map(|r| gy[r * d + j] as f64 * xhat[r * d + j] as f64).sum();
                    s[j] += acc as f32;
                }
            }
            if let Some(s) = slot(nodes, grads, *beta) {
                for j in 0..d {
                    let acc: f64 = (0..bsz).map(|r| gy[r * d + j] as f64).sum();
                    s[j] += acc as f32;
                }
            }
            if let Some(s) = slot(nodes, grads, *x) {
                for j in 0..d {
                    if *train {
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for r in 0..bsz {
                            let dxh = gy[r * d + j] as f64 * g[j] as f64;
                            m1 += dxh;
                            m2 += dxh * xhat[r * d + j] as f64;
                        }
                        let (m1, m2) = (m1 / bsz as f64, m2 / bsz as f64);
                        for r in 0..bsz {
                            let dxh = gy[r * d + j] as f64 * g[j] as f64;
                            s[r * d + j] += (rstd[j] as f64 * (dxh - m1 - xhat[r * d + j] as f64 * m2)) as f32;
                        }
                    } else {
                        for r in 0..bsz {
                            s[r * d + j] += gy[r * d + j] * g[j] * rstd[j];
                        }
                    }
                }
            }
        }
        Op::GatherRows { x, idx } => {
            if let Some(s) = slot(nodes, grads, *x) {
                let c = gy.len() / idx.len().max(1);
                for (k, &i) in idx.iter().enumerate() {
                    kernels::add_assign(&mut s[i * c..(i + 1) * c], &gy[k * c..(k + 1) * c]);
                }
            }
        }
        Op::ConcatRows(xs) => {
            let mut off = 0;
            for &x in xs {
                let n = val(x).len();
                acc(nodes, grads, x, &gy[off..off + n]);
                off += n;
            }
        }
        Op::Narrow { x, axis, start } => {
            let shape = val(*x).shape();
            let (outer, axis_len, inner) = axis_split(shape, *axis);
            let len = y.shape()[*axis];
            if let Some(s) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let base = (o * axis_len + start) * inner;
                    kernels::add_assign(&mut s[base..base + len * inner], &gy[o * len * inner..(o + 1) * len * inner]);
                }
            }
        }
        Op::Permute { x, axes } => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let (_, back) = permute_data(gy, y.shape(), &inverse);
            acc(nodes, grads, *x, &back);
        }
        Op::Reshape(x) => acc(nodes, grads, *x, gy),
        Op::Sum(x) => {
            if let Some(s) = slot(nodes, grads, *x) {
                s.iter_mut().for_each(|d| *d += gy[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(s) = slot(nodes, grads, *x) {
                let g = gy[0] / s.len() as f32;
                s.iter_mut().for_each(|d| *d += g);
            }
        }
        Op::CrossEntropy { logits, targets } => {
            if let Some(s) = slot(nodes, grads, *logits) {
                s.iter_mut().zip(targets).for_each(|(d, &t)| *d += gy[0] * t);
            }
        }
        Op::PairwiseSqDist(x) => {
            let xv = val(*x);
            let (b, dim) = (xv.shape()[0], xv.shape()[1]);
            if let Some(s) = slot(nodes, grads, *x) {
                for i in 0..b {
                    for j in 0..b {
                        if i == j {
                            continue;
                        }
                        let w = 2.0 * (gy[i * b + j] + gy[j * b + i]);
                        if w == 0.0 {
                            continue;
                        }
                        let (xi, xj) = (xv.row(i), xv.row(j));
                        for k in 0..dim {
                            s[i * dim + k] += w * (xi[k] - xj[k]);
                        }
                    }
                }
            }
        }
        Op::GatherFlat { x, idx } => {
            if let Some(s) = slot(nodes, grads, *x) {
                for (k, &i) in idx.iter().enumerate() {
                    s[i] += gy[k];
                }
            }
        }
        Op::Custom { inputs, backward } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
            let gt = Tensor::new(y.shape(), gy.to_vec())?;
            let gs = backward(&ins, y, &gt);
            if gs.len() != inputs.len() {
                return Err(Error::Contract(format!(
                    "custom backward returned {} grads for {} inputs",
                    gs.len(),
                    inputs.len()
                )));
            }
            for (&v, g) in inputs.iter().zip(&gs) {
                if g.len() != val(v).len() {
                    bail!(Dimension, "custom backward grad of {} values for input of {}", g.len(), val(v).len());
                }
                acc(nodes, grads, v, g.data());
            }
        }
    }
    Ok(())
}
