//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node in construction order;
//! [`Graph::backward`] walks the nodes once in reverse and accumulates
//! gradients additively, so fan-out is handled without special casing.
//! Only scalar–tensor broadcasting is supported.

use crate::error::{bail, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A clamp bound: either a constant or a single-element graph node, so the
/// bound itself can receive a gradient.
#[derive(Debug, Clone, Copy)]
pub enum Bound {
    Const(f64),
    Var(Var),
}

impl From<f64> for Bound {
    fn from(v: f64) -> Self {
        Bound::Const(v)
    }
}

impl From<Var> for Bound {
    fn from(v: Var) -> Self {
        Bound::Var(v)
    }
}

/// Normalisation statistics used by [`Graph::batch_norm`].
#[derive(Debug, Clone)]
pub enum BnStats {
    /// Statistics of the input batch, shifted per channel by constant offsets:
    /// `mean = batch_mean + mean_offset`, `var = batch_var + var_offset`.
    /// Zero offsets give textbook training-mode batch norm.
    Batch {
        mean_offset: Vec<f64>,
        var_offset: Vec<f64>,
    },
    /// Constant statistics (evaluation mode).
    Fixed { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    Clamp {
        x: Var,
        lo: Bound,
        hi: Bound,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats,
        eps: f64,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Substitute(Var),
    RoundSte(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
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
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Elementwise sum; one side may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product; one side may be a single-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    fn broadcast_binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else if tb.numel() == 1 {
            let y = tb.item();
            Ok(ta.map(|x| f(x, y)))
        } else if ta.numel() == 1 {
            let x = ta.item();
            Ok(tb.map(|y| f(x, y)))
        } else {
            bail!(Dimension, "cannot combine shapes {:?} and {:?}", ta.shape(), tb.shape())
        }
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            bail!(Dimension, "matmul of {:?} and {:?}", ta.shape(), tb.shape());
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let value = Tensor::new(vec![m, n], kernels::matmul(ta.data(), tb.data(), m, k, n))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            bail!(Dimension, "transpose needs a matrix, got {:?}", t.shape());
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let value = Tensor::new(vec![c, r], kernels::transpose(t.data(), r, c))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Zero-padded cross-correlation of `x: [B,C,H,W]` with `w: [F,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = conv_geom(self.value(x).shape(), self.value(w).shape(), stride, padding)?;
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let value = Tensor::new(
            vec![geom.batch, geom.out_channels, geom.out_height(), geom.out_width()],
            out,
        )?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::Conv2d { x, w, geom }, rg))
    }

    /// Mean over non-overlapping `k×k` windows of `x: [B,C,H,W]`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (planes, h, w) = pool_dims(&shape, k)?;
        let out = kernels::avg_pool_forward(self.value(x).data(), planes, h, w, k);
        let value = Tensor::new(vec![shape[0], shape[1], h / k, w / k], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::AvgPool { x, k }, rg))
    }

    /// `max(lo, min(x, hi))` elementwise.
    ///
    /// The sub-derivative with respect to `x` is 1 on the closed interval
    /// `[lo, hi]`; `hi` receives 1 where `x > hi` and `lo` where `x < lo`.
    pub fn clamp(&mut self, x: Var, lo: impl Into<Bound>, hi: impl Into<Bound>) -> Result<Var> {
        let (lo, hi) = (lo.into(), hi.into());
        let lo_v = self.bound_value(lo)?;
        let hi_v = self.bound_value(hi)?;
        if lo_v > hi_v {
            bail!(Parameter, "clamp bounds out of order: {lo_v} > {hi_v}");
        }
        let value = self.value(x).map(|v| v.min(hi_v).max(lo_v));
        let rg = self.rg(x) || self.bound_rg(lo) || self.bound_rg(hi);
        Ok(self.push(value, Op::Clamp { x, lo, hi }, rg))
    }

    fn bound_value(&self, b: Bound) -> Result<f64> {
        match b {
            Bound::Const(v) => Ok(v),
            Bound::Var(v) => {
                let t = self.value(v);
                if t.numel() != 1 {
                    bail!(Dimension, "clamp bound must be a scalar, got {:?}", t.shape());
                }
                Ok(t.item())
            }
        }
    }

    fn bound_rg(&self, b: Bound) -> bool {
        matches!(b, Bound::Var(v) if self.rg(v))
    }

    /// Per-channel batch normalisation of `x: [B, C, ...]` followed by the affine `γ·x̂ + β`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: BnStats, eps: f64) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            bail!(Dimension, "batch norm needs [B, C, ...], got {shape:?}");
        }
        let c = shape[1];
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            bail!(Dimension, "batch norm affine parameters must have {c} channels");
        }
        let (len_ok, what) = match &stats {
            BnStats::Batch {
                mean_offset,
                var_offset,
            } => (mean_offset.len() == c && var_offset.len() == c, "offsets"),
            BnStats::Fixed { mean, var } => (mean.len() == c && var.len() == c, "statistics"),
        };
        if !len_ok {
            bail!(Dimension, "batch norm {what} must have {c} channels");
        }
        if !(eps > 0.0) {
            bail!(Parameter, "batch norm eps must be positive");
        }
        let (mean, var) = self.bn_moments(x, &stats);
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let spatial: usize = shape[2..].iter().product();
        let mut out = vec![0.0; xs.len()];
        for (i, (o, &xv)) in out.iter_mut().zip(xs).enumerate() {
            let ch = (i / spatial) % c;
            *o = g[ch] * (xv - mean[ch]) / (var[ch] + eps).sqrt() + b[ch];
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                stats,
                eps,
            },
            rg,
        ))
    }

    /// Effective per-channel (mean, var) used in normalisation.
    fn bn_moments(&self, x: Var, stats: &BnStats) -> (Vec<f64>, Vec<f64>) {
        match stats {
            BnStats::Fixed { mean, var } => (mean.clone(), var.clone()),
            BnStats::Batch {
                mean_offset,
                var_offset,
            } => {
                let (m, v) = channel_moments(self.value(x));
                (
                    m.iter().zip(mean_offset).map(|(a, b)| a + b).collect(),
                    v.iter().zip(var_offset).map(|(a, b)| a + b).collect(),
                )
            }
        }
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            bail!(Dimension, "logits {:?} do not match {} labels", t.shape(), labels.len());
        }
        let k = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            bail!(Input, "label {bad} out of range for {k} classes");
        }
        let mut probs = vec![0.0; t.numel()];
        let mut loss = 0.0;
        for ((row, p), &label) in t.data().chunks_exact(k).zip(probs.chunks_exact_mut(k)).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - max).exp() / z;
            }
            loss += z.ln() + max - row[label];
        }
        loss /= labels.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Takes its forward value from `value` while passing gradients straight to `x`.
    pub fn substitute(&mut self, x: Var, value: Tensor) -> Result<Var> {
        if value.shape() != self.value(x).shape() {
            bail!(
                Dimension,
                "substituted value {:?} does not match {:?}",
                value.shape(),
                self.value(x).shape()
            );
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::Substitute(x), rg))
    }

    /// Rounds to the grid `step·ℤ`; the backward pass is the identity (straight-through).
    pub fn round_ste(&mut self, x: Var, step: f64) -> Result<Var> {
        if !(step > 0.0) {
            bail!(Parameter, "rounding step must be positive");
        }
        let value = self.value(x).map(|v| (v / step).round() * step);
        let rg = self.rg(x);
        Ok(self.push(value, Op::RoundSte(x), rg))
    }

    /// Backpropagates from a single-element `root`, adding into leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            bail!(
                Usage,
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            );
        }
        if !self.rg(root) {
            return Ok(());
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        local[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    let acc = self.nodes[i].grad.get_or_insert_with(|| vec![0.0; g.len()]);
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = self.reduce_to(a, &g);
                    let gb = self.reduce_to(b, &g);
                    self.accum(&mut local, a, ga);
                    self.accum(&mut local, b, gb);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga: Vec<f64> = {
                        let vb = self.value(b);
                        g.iter().enumerate().map(|(j, gv)| gv * bcast(vb, j)).collect()
                    };
                    let gb: Vec<f64> = {
                        let va = self.value(a);
                        g.iter().enumerate().map(|(j, gv)| gv * bcast(va, j)).collect()
                    };
                    let ga = self.reduce_to(a, &ga);
                    let gb = self.reduce_to(b, &gb);
                    self.accum(&mut local, a, ga);
                    self.accum(&mut local, b, gb);
                }
                Op::Scale(x, c) => {
                    let (x, c) = (*x, *c);
                    self.accum(&mut local, x, g.iter().map(|v| v * c).collect());
                }
                Op::Sum(x) => {
                    let x = *x;
                    let n = self.value(x).numel();
                    self.accum(&mut local, x, vec![g[0]; n]);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (ta, tb) = (self.value(a), self.value(b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    // dA = dC·Bᵀ, dB = Aᵀ·dC
                    let ga = kernels::matmul(&g, &kernels::transpose(tb.data(), k, n), m, n, k);
                    let gb = kernels::matmul(&kernels::transpose(ta.data(), m, k), &g, k, m, n);
                    self.accum(&mut local, a, ga);
                    self.accum(&mut local, b, gb);
                }
                Op::Transpose(x) => {
                    let x = *x;
                    let s = self.value(x).shape();
                    let gx = kernels::transpose(&g, s[1], s[0]);
                    self.accum(&mut local, x, gx);
                }
                Op::Reshape(x) | Op::Substitute(x) | Op::RoundSte(x) => {
                    let x = *x;
                    self.accum(&mut local, x, g);
                }
                Op::Conv2d { x, w, geom } => {
                    let (x, w, geom) = (*x, *w, *geom);
                    if self.rg(x) {
                        let gx = kernels::conv2d_backward_input(&g, self.value(w).data(), &geom);
                        self.accum(&mut local, x, gx);
                    }
                    if self.rg(w) {
                        let gw = kernels::conv2d_backward_weight(&g, self.value(x).data(), &geom);
                        self.accum(&mut local, w, gw);
                    }
                }
                Op::AvgPool { x, k } => {
                    let (x, k) = (*x, *k);
                    let s = self.value(x).shape();
                    let gx = kernels::avg_pool_backward(&g, s[0] * s[1], s[2], s[3], k);
                    self.accum(&mut local, x, gx);
                }
                Op::Clamp { x, lo, hi } => {
                    let (x, lo, hi) = (*x, *lo, *hi);
                    let lo_v = self.bound_value(lo)?;
                    let hi_v = self.bound_value(hi)?;
                    let xs = self.value(x).data();
                    let mut gx = vec![0.0; g.len()];
                    let (mut g_lo, mut g_hi) = (0.0, 0.0);
                    for ((gxi, &gv), &xv) in gx.iter_mut().zip(&g).zip(xs) {
                        if xv > hi_v {
                            g_hi += gv;
                        } else if xv < lo_v {
                            g_lo += gv;
                        } else {
                            *gxi = gv;
                        }
                    }
                    self.accum(&mut local, x, gx);
                    if let Bound::Var(v) = lo {
                        self.accum(&mut local, v, vec![g_lo]);
                    }
                    if let Bound::Var(v) = hi {
                        self.accum(&mut local, v, vec![g_hi]);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    stats,
                    eps,
                } => {
                    let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                    let stats = stats.clone();
                    let (gx, gg, gb) = self.bn_backward(x, gamma, &stats, eps, &g);
                    self.accum(&mut local, x, gx);
                    self.accum(&mut local, gamma, gg);
                    self.accum(&mut local, beta, gb);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let logits = *logits;
                    let bsz = labels.len();
                    let k = probs.len() / bsz;
                    let scale = g[0] / bsz as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (b, &label) in labels.iter().enumerate() {
                        gl[b * k + label] -= scale;
                    }
                    self.accum(&mut local, logits, gl);
                }
            }
        }
        Ok(())
    }

    fn accum(&self, local: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut local[v.0] {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums a broadcast gradient back down to a scalar operand.
    fn reduce_to(&self, v: Var, g: &[f64]) -> Vec<f64> {
        if self.value(v).numel() == 1 && g.len() != 1 {
            vec![g.iter().sum()]
        } else {
            g.to_vec()
        }
    }

    fn bn_backward(&self, x: Var, gamma: Var, stats: &BnStats, eps: f64, g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let tx = self.value(x);
        let shape = tx.shape();
        let c = shape[1];
        let spatial: usize = shape[2..].iter().product();
        let count = (tx.numel() / c) as f64;
        let gam = self.value(gamma).data();
        let (mean, var) = self.bn_moments(x, stats);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let chan = |i: usize| (i / spatial) % c;

        let mut g_gamma = vec![0.0; c];
        let mut g_beta = vec![0.0; c];
        for (i, (&gv, &xv)) in g.iter().zip(tx.data()).enumerate() {
            let ch = chan(i);
            g_gamma[ch] += gv * (xv - mean[ch]) * inv_std[ch];
            g_beta[ch] += gv;
        }
        let mut gx = vec![0.0; g.len()];
        match stats {
            BnStats::Fixed { .. } => {
                for (i, (o, &gv)) in gx.iter_mut().zip(g).enumerate() {
                    let ch = chan(i);
                    *o = gv * gam[ch] * inv_std[ch];
                }
            }
            BnStats::Batch { .. } => {
                let (batch_mean, _) = channel_moments(tx);
                // sums over the channel of dx̂ and dx̂·(x − μ)
                let mut sum_gh = vec![0.0; c];
                let mut sum_gh_xc = vec![0.0; c];
                for (i, (&gv, &xv)) in g.iter().zip(tx.data()).enumerate() {
                    let ch = chan(i);
                    let gh = gv * gam[ch];
                    sum_gh[ch] += gh;
                    sum_gh_xc[ch] += gh * (xv - mean[ch]);
                }
                for (i, (o, (&gv, &xv))) in gx.iter_mut().zip(g.iter().zip(tx.data())).enumerate() {
                    let ch = chan(i);
                    let s = inv_std[ch];
                    let d_var = -0.5 * s * s * s * sum_gh_xc[ch];
                    *o = s * (gv * gam[ch] - sum_gh[ch] / count) + d_var * 2.0 * (xv - batch_mean[ch]) / count;
                }
            }
        }
        (gx, g_gamma, g_beta)
    }
}

fn bcast(t: &Tensor, j: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[j]
    }
}

/// Per-channel biased mean and variance of `x: [B, C, ...]` over all but the channel axis.
pub fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let shape = x.shape();
    let c = shape[1];
    let spatial: usize = shape[2..].iter().product();
    let count = (x.numel() / c) as f64;
    let mut mean = vec![0.0; c];
    for (i, &v) in x.data().iter().enumerate() {
        mean[(i / spatial) % c] += v;
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for (i, &v) in x.data().iter().enumerate() {
        let ch = (i / spatial) % c;
        var[ch] += (v - mean[ch]) * (v - mean[ch]);
    }
    var.iter_mut().for_each(|s| *s /= count);
    (mean, var)
}

pub(crate) fn conv_geom(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 {
        bail!(
            Dimension,
            "conv2d needs [B,C,H,W] input and [F,C,kh,kw] kernel, got {x:?} and {w:?}"
        );
    }
    if x[1] != w[1] {
        bail!(Dimension, "conv2d channel mismatch: input {} vs kernel {}", x[1], w[1]);
    }
    if stride == 0 {
        bail!(Parameter, "conv2d stride must be positive");
    }
    if w[2] > x[2] + 2 * padding || w[3] > x[3] + 2 * padding {
        bail!(
            Dimension,
            "kernel {}x{} larger than padded input {}x{}",
            w[2],
            w[3],
            x[2] + 2 * padding,
            x[3] + 2 * padding
        );
    }
    Ok(ConvGeom {
        batch: x[0],
        in_channels: x[1],
        height: x[2],
        width: x[3],
        out_channels: w[0],
        kernel_h: w[2],
        kernel_w: w[3],
        stride,
        padding,
    })
}

pub(crate) fn pool_dims(shape: &[usize], k: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        bail!(Dimension, "avg_pool2d needs [B,C,H,W], got {shape:?}");
    }
    if k == 0 || shape[2] % k != 0 || shape[3] % k != 0 {
        bail!(
            Dimension,
            "spatial dims {}x{} not divisible by pool size {k}",
            shape[2],
            shape[3]
        );
    }
    Ok((shape[0] * shape[1], shape[2], shape[3]))
}
