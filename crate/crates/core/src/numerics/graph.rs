//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` is a single reverse sweep.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Smoothing term of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-6;
const NORM_EPS: f64 = 1e-5;
const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    SoftDice,
    CrossEntropy,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Sigmoid(Var),
    /// Softmax across the channel axis.
    Softmax(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Concat(Var, Var),
    /// Multiplies each `(batch, channel)` plane by a constant.
    ChannelScale {
        input: Var,
        scales: Vec<f64>,
    },
    InstanceNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    SoftDice {
        pred: Var,
        target: Var,
    },
    CrossEntropy {
        pred: Var,
        target: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn feature_map(&self, op: &'static str, v: Var) -> Result<&Tensor> {
        let t = self.value(v);
        if !(4..=5).contains(&t.rank()) {
            return Err(Error::invalid(
                op,
                format!(
                    "expected [B, C, spatial...] with 2 or 3 spatial dims, got {:?}",
                    t.shape()
                ),
            ));
        }
        Ok(t)
    }

    /// Cross-correlation of `[B, Cin, S...]` with `[Cout, Cin, k...]`.
    pub fn conv(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.feature_map("conv", input)?;
        let w = self.value(weight);
        let b = self.value(bias);
        if w.rank() != x.rank() {
            return Err(Error::shape("conv", "weight rank", x.rank(), w.rank()));
        }
        if w.shape()[1] != x.channels() {
            return Err(Error::shape(
                "conv",
                "input channels (Cin)",
                w.shape()[1],
                x.channels(),
            ));
        }
        if b.numel() != w.shape()[0] {
            return Err(Error::shape(
                "conv",
                "bias length (Cout)",
                w.shape()[0],
                b.numel(),
            ));
        }
        let geom = ConvGeom::new(
            x.channels(),
            w.shape()[0],
            &x.shape()[2..],
            &w.shape()[2..],
            stride,
            padding,
        )?;
        let batch = x.batch();
        let data = kernels::conv_forward(&geom, batch, x.data(), w.data(), b.data());
        let mut shape = vec![batch, geom.cout];
        let out3 = geom.output;
        shape.extend_from_slice(if x.rank() == 4 { &out3[1..] } else { &out3[..] });
        let value = Tensor::new(shape, data)?;
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::from_fn(t.shape(), |i| {
            let x = t.data()[i];
            if x < 0.0 {
                0.0
            } else {
                x
            }
        });
        let rg = self.needs(&[x]);
        self.push(value, rg, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::from_fn(t.shape(), |i| sigmoid(t.data()[i]));
        let rg = self.needs(&[x]);
        self.push(value, rg, Op::Sigmoid(x))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let t = self.feature_map("softmax", x)?;
        let (b, c, s) = (t.batch(), t.channels(), t.spatial_len());
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            let base = bi * c * s;
            for p in 0..s {
                let max = (0..c)
                    .map(|k| src[base + k * s + p])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..c {
                    let e = (src[base + k * s + p] - max).exp();
                    out[base + k * s + p] = e;
                    total += e;
                }
                for k in 0..c {
                    out[base + k * s + p] /= total;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, rg, Op::Softmax(x)))
    }

    /// Halves every spatial extent, keeping the window maximum.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let t = self.feature_map("maxpool2", x)?;
        for (axis, &e) in t.shape()[2..].iter().enumerate() {
            if e % 2 != 0 {
                return Err(Error::invalid(
                    "maxpool2",
                    format!("spatial axis {axis} has odd extent {e}"),
                ));
            }
        }
        let flat = t.rank() == 4;
        let dims = kernels::spatial3(&t.shape()[2..])?;
        let planes = t.batch() * t.channels();
        let (data, argmax) = kernels::maxpool2_forward(planes, dims, flat, t.data());
        let mut shape = t.shape().to_vec();
        for e in &mut shape[2..] {
            *e /= 2;
        }
        let value = Tensor::new(shape, data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, rg, Op::MaxPool2 { input: x, argmax }))
    }

    /// Nearest-neighbour upsampling by two along every spatial axis.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let t = self.feature_map("upsample_nearest2", x)?;
        let flat = t.rank() == 4;
        let dims = kernels::spatial3(&t.shape()[2..])?;
        let planes = t.batch() * t.channels();
        let data = kernels::upsample2_forward(planes, dims, flat, t.data());
        let mut shape = t.shape().to_vec();
        for e in &mut shape[2..] {
            *e *= 2;
        }
        let value = Tensor::new(shape, data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, rg, Op::Upsample2(x)))
    }

    /// Stacks `first` then `second` along the channel axis.
    pub fn concat_channels(&mut self, first: Var, second: Var) -> Result<Var> {
        let a = self.value(first);
        let b = self.value(second);
        if a.rank() != b.rank() || a.rank() < 2 {
            return Err(Error::shape("concat", "rank", a.rank(), b.rank()));
        }
        if a.batch() != b.batch() {
            return Err(Error::shape("concat", "batch", a.batch(), b.batch()));
        }
        for axis in 2..a.rank() {
            if a.shape()[axis] != b.shape()[axis] {
                return Err(Error::shape(
                    "concat",
                    format!("spatial axis {}", axis - 2),
                    a.shape()[axis],
                    b.shape()[axis],
                ));
            }
        }
        let (ca, cb, s) = (a.channels(), b.channels(), a.spatial_len());
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        for bi in 0..a.batch() {
            data.extend_from_slice(&a.data()[bi * ca * s..(bi + 1) * ca * s]);
            data.extend_from_slice(&b.data()[bi * cb * s..(bi + 1) * cb * s]);
        }
        let mut shape = a.shape().to_vec();
        shape[1] = ca + cb;
        let value = Tensor::new(shape, data)?;
        let rg = self.needs(&[first, second]);
        Ok(self.push(value, rg, Op::Concat(first, second)))
    }

    /// Scales plane `(b, c)` by `scales[b * C + c]`; used for channel dropout
    /// and masking.
    pub fn channel_scale(&mut self, x: Var, scales: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        let planes = t.batch() * t.channels();
        if scales.len() != planes {
            return Err(Error::shape(
                "channel_scale",
                "batch x channels",
                planes,
                scales.len(),
            ));
        }
        let s = t.spatial_len();
        let value = Tensor::from_fn(t.shape(), |i| t.data()[i] * scales[i / s]);
        let rg = self.needs(&[x]);
        Ok(self.push(value, rg, Op::ChannelScale { input: x, scales }))
    }

    /// Per-sample, per-channel normalization with an affine `gamma`/`beta`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.feature_map("instance_norm", x)?;
        let c = t.channels();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(
                "instance_norm",
                "channels",
                c,
                self.value(gamma).numel(),
            ));
        }
        let s = t.spatial_len();
        let planes = t.batch() * c;
        let mut normalized = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; planes];
        for p in 0..planes {
            let src = &t.data()[p * s..(p + 1) * s];
            let mean = src.iter().sum::<f64>() / s as f64;
            let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[p] = is;
            for (n, v) in normalized[p * s..(p + 1) * s].iter_mut().zip(src) {
                *n = (v - mean) * is;
            }
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let value = Tensor::from_fn(t.shape(), |i| {
            let ch = (i / s) % c;
            g[ch] * normalized[i] + bt[ch]
        });
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            value,
            rg,
            Op::InstanceNorm {
                input: x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", "element count", ta.numel(), tb.numel()));
        }
        let value = Tensor::from_fn(ta.shape(), |i| ta.data()[i] + tb.data()[i]);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", "element count", ta.numel(), tb.numel()));
        }
        let value = Tensor::from_fn(ta.shape(), |i| ta.data()[i] * tb.data()[i]);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(total), rg, Op::Sum(x))
    }

    /// Scalar loss between per-channel probabilities and a same-shape target.
    ///
    /// Soft Dice is `1 - (2·Σpt + ε)/(Σp + Σt + ε)` per channel (sums over
    /// batch and space), averaged over channels. Cross-entropy is the mean
    /// binary CE for a single channel and the mean categorical CE otherwise.
    pub fn loss(&mut self, pred: Var, target: Var, kind: LossKind) -> Result<Var> {
        let (p, t) = (self.feature_map("loss", pred)?, self.value(target));
        if p.shape() != t.shape() {
            let axis = p
                .shape()
                .iter()
                .zip(t.shape())
                .position(|(a, b)| a != b)
                .unwrap_or(0);
            let (e, g) = (
                p.shape().get(axis).copied().unwrap_or(0),
                t.shape().get(axis).copied().unwrap_or(0),
            );
            return Err(Error::shape("loss", format!("axis {axis}"), e, g));
        }
        if !p.is_finite() || !t.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let value = match kind {
            LossKind::SoftDice => {
                let stats = dice_stats(p, t);
                let c = stats.len() as f64;
                stats
                    .iter()
                    .map(|&(i, sp, st)| 1.0 - (2.0 * i + DICE_EPS) / (sp + st + DICE_EPS))
                    .sum::<f64>()
                    / c
            }
            LossKind::CrossEntropy => cross_entropy(p, t),
        };
        let rg = self.needs(&[pred]);
        let op = match kind {
            LossKind::SoftDice => Op::SoftDice { pred, target },
            LossKind::CrossEntropy => Op::CrossEntropy { pred, target },
        };
        Ok(self.push(Tensor::scalar(value), rg, op))
    }

    /// Populates `grad` of every node that requires it with ∂loss/∂node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(shape));
        }
        self.backward_done = true;
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &grad)?;
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, grad: &[f64]) -> Result<()> {
        let out = &self.nodes[idx].value;
        let mut deltas: Vec<(Var, Vec<f64>)> = Vec::new();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            } => {
                let want = [self.wants(*input), self.wants(*weight), self.wants(*bias)];
                let x = self.value(*input);
                let grads = kernels::conv_backward(
                    geom,
                    x.batch(),
                    x.data(),
                    self.value(*weight).data(),
                    grad,
                    want,
                );
                if let Some(g) = grads.input {
                    deltas.push((*input, g));
                }
                if let Some(g) = grads.weight {
                    deltas.push((*weight, g));
                }
                if let Some(g) = grads.bias {
                    deltas.push((*bias, g));
                }
            }
            Op::Relu(x) => {
                let src = self.value(*x).data();
                let d = grad
                    .iter()
                    .zip(src)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                deltas.push((*x, d));
            }
            Op::Sigmoid(x) => {
                let d = grad
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                deltas.push((*x, d));
            }
            Op::Softmax(x) => {
                let (b, c, s) = (out.batch(), out.channels(), out.spatial_len());
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for bi in 0..b {
                    let base = bi * c * s;
                    for p in 0..s {
                        let dot: f64 = (0..c)
                            .map(|k| grad[base + k * s + p] * y[base + k * s + p])
                            .sum();
                        for k in 0..c {
                            let at = base + k * s + p;
                            d[at] = y[at] * (grad[at] - dot);
                        }
                    }
                }
                deltas.push((*x, d));
            }
            Op::MaxPool2 { input, argmax } => {
                let mut d = vec![0.0; self.value(*input).numel()];
                for (g, &at) in grad.iter().zip(argmax) {
                    d[at] += g;
                }
                deltas.push((*input, d));
            }
            Op::Upsample2(x) => {
                let t = self.value(*x);
                let dims = kernels::spatial3(&t.shape()[2..])?;
                let d = kernels::upsample2_backward(
                    t.batch() * t.channels(),
                    dims,
                    t.rank() == 4,
                    grad,
                );
                deltas.push((*x, d));
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (self.value(*a).channels(), self.value(*b).channels());
                let s = out.spatial_len();
                let mut da = Vec::with_capacity(self.value(*a).numel());
                let mut db = Vec::with_capacity(self.value(*b).numel());
                for chunk in grad.chunks((ca + cb) * s) {
                    da.extend_from_slice(&chunk[..ca * s]);
                    db.extend_from_slice(&chunk[ca * s..]);
                }
                deltas.push((*a, da));
                deltas.push((*b, db));
            }
            Op::ChannelScale { input, scales } => {
                let s = out.spatial_len();
                let d = grad
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * scales[i / s])
                    .collect();
                deltas.push((*input, d));
            }
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (c, s) = (out.channels(), out.spatial_len());
                let gam = self.value(*gamma).data();
                let mut dg = vec![0.0; c];
                let mut dbt = vec![0.0; c];
                let mut dx = vec![0.0; grad.len()];
                for (p, is) in inv_std.iter().enumerate() {
                    let ch = p % c;
                    let gs = &grad[p * s..(p + 1) * s];
                    let ns = &normalized[p * s..(p + 1) * s];
                    let sum_g: f64 = gs.iter().sum();
                    let sum_gn: f64 = gs.iter().zip(ns).map(|(g, n)| g * n).sum();
                    dg[ch] += sum_gn;
                    dbt[ch] += sum_g;
                    let n = s as f64;
                    for ((d, g), nv) in dx[p * s..(p + 1) * s].iter_mut().zip(gs).zip(ns) {
                        *d = gam[ch] * is / n * (n * g - sum_g - nv * sum_gn);
                    }
                }
                deltas.push((*input, dx));
                deltas.push((*gamma, dg));
                deltas.push((*beta, dbt));
            }
            Op::Add(a, b) => {
                deltas.push((*a, grad.to_vec()));
                deltas.push((*b, grad.to_vec()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                deltas.push((*a, grad.iter().zip(vb).map(|(g, y)| g * y).collect()));
                deltas.push((*b, grad.iter().zip(va).map(|(g, x)| g * x).collect()));
            }
            Op::Sum(x) => {
                deltas.push((*x, vec![grad[0]; self.value(*x).numel()]));
            }
            Op::SoftDice { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let stats = dice_stats(p, t);
                let (c, s) = (p.channels(), p.spatial_len());
                let scale = grad[0] / c as f64;
                let d = t
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, tv)| {
                        let (inter, sp, st) = stats[(i / s) % c];
                        let den = sp + st + DICE_EPS;
                        -scale * (2.0 * tv * den - (2.0 * inter + DICE_EPS)) / (den * den)
                    })
                    .collect();
                deltas.push((*pred, d));
            }
            Op::CrossEntropy { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let n = (p.batch() * p.spatial_len()) as f64;
                let binary = p.channels() == 1;
                let d = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&pv, &tv)| {
                        let pc = pv.max(LOG_FLOOR);
                        let mut v = if pv > LOG_FLOOR { -tv / pc } else { 0.0 };
                        if binary {
                            let q = 1.0 - pv;
                            if q > LOG_FLOOR {
                                v += (1.0 - tv) / q;
                            }
                        }
                        grad[0] * v / n
                    })
                    .collect();
                deltas.push((*pred, d));
            }
        }
        for (v, d) in deltas {
            self.accumulate(v, d);
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per channel: (Σ p·t, Σ p, Σ t) over batch and space.
fn dice_stats(p: &Tensor, t: &Tensor) -> Vec<(f64, f64, f64)> {
    let (c, s) = (p.channels(), p.spatial_len());
    let mut stats = vec![(0.0, 0.0, 0.0); c];
    for (i, (pv, tv)) in p.data().iter().zip(t.data()).enumerate() {
        let e = &mut stats[(i / s) % c];
        e.0 += pv * tv;
        e.1 += pv;
        e.2 += tv;
    }
    stats
}

fn cross_entropy(p: &Tensor, t: &Tensor) -> f64 {
    let n = (p.batch() * p.spatial_len()) as f64;
    let binary = p.channels() == 1;
    let total: f64 = p
        .data()
        .iter()
        .zip(t.data())
        .map(|(&pv, &tv)| {
            let mut v = -tv * pv.max(LOG_FLOOR).ln();
            if binary {
                v -= (1.0 - tv) * (1.0 - pv).max(LOG_FLOOR).ln();
            }
            v
        })
        .sum();
    total / n
}
