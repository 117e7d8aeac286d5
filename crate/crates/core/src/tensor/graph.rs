//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order and `backward` is a single reverse sweep.

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Batch-norm running statistics, one entry per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Scale(Var, T),
    AvgPool(Var),
    WeightedSum {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Reshape(Var),
    Sum(Var),
    Mse {
        pred: Var,
        target: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A computation graph over tensors of element type `T`.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor. Gradients are kept only for leaves with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// 2D cross-correlation. `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [batch, cin, h, wd] = xs[..] else {
            return Err(Error::shape(format!("conv2d input must be rank 4, got {xs:?}")));
        };
        let [cout, wcin, kh, kw] = ws[..] else {
            return Err(Error::shape(format!("conv2d weight must be rank 4, got {ws:?}")));
        };
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {cin}, weight expects {wcin}"
            )));
        }
        let geom = ConvGeom::new(batch, cin, (h, wd), cout, (kh, kw), (pad, pad), (stride, stride))?;
        self.conv(x, w, b, geom, vec![batch, cout, geom.ho, geom.wo])
    }

    /// 1D cross-correlation. `x: [B, Cin, L]`, `w: [Cout, Cin, k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [batch, cin, len] = xs[..] else {
            return Err(Error::shape(format!("conv1d input must be rank 3, got {xs:?}")));
        };
        let [cout, wcin, k] = ws[..] else {
            return Err(Error::shape(format!("conv1d weight must be rank 3, got {ws:?}")));
        };
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv1d channel mismatch: input has {cin}, weight expects {wcin}"
            )));
        }
        let geom = ConvGeom::new(batch, cin, (1, len), cout, (1, k), (0, pad), (1, stride))?;
        self.conv(x, w, b, geom, vec![batch, cout, geom.wo])
    }

    fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom, out_shape: Vec<usize>) -> Result<Var> {
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape(format!(
                    "conv bias must have shape [{}], got {:?}",
                    geom.cout,
                    self.shape(b)
                )));
            }
        }
        let out = kernels::conv_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Conv { x, w, b, geom }, rg))
    }

    /// Batch normalisation over channel axis 1. In training mode the batch
    /// statistics normalise the input and update `running`; in eval mode
    /// `running` is used as is.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<T>,
        training: bool,
        cfg: BatchNormConfig,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape(format!("batchnorm input must be rank >= 2, got {xs:?}")));
        }
        let (batch, ch) = (xs[0], xs[1]);
        let span: usize = xs[2..].iter().product();
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] || running.mean.len() != ch {
            return Err(Error::shape(format!("batchnorm parameters do not match {ch} channels")));
        }
        let xd = self.value(x).data();
        let (mean, inv_std): (Vec<T>, Vec<T>) = if training {
            let count = (batch * span) as f64;
            let mut mean = vec![0.0f64; ch];
            let mut var = vec![0.0f64; ch];
            for c in 0..ch {
                let mut s = 0.0;
                for b in 0..batch {
                    let off = (b * ch + c) * span;
                    s += xd[off..off + span].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let m = s / count;
                let mut ss = 0.0;
                for b in 0..batch {
                    let off = (b * ch + c) * span;
                    ss += xd[off..off + span]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - m;
                            d * d
                        })
                        .sum::<f64>();
                }
                mean[c] = m;
                var[c] = ss / count;
            }
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for c in 0..ch {
                let rm = running.mean[c].as_f64();
                let rv = running.var[c].as_f64();
                running.mean[c] = T::from_f64_lossy((1.0 - cfg.momentum) * rm + cfg.momentum * mean[c]);
                running.var[c] = T::from_f64_lossy((1.0 - cfg.momentum) * rv + cfg.momentum * var[c] * unbiased);
            }
            (
                mean.iter().map(|&m| T::from_f64_lossy(m)).collect(),
                var.iter()
                    .map(|&v| T::from_f64_lossy(1.0 / (v + cfg.eps).sqrt()))
                    .collect(),
            )
        } else {
            (
                running.mean.clone(),
                running
                    .var
                    .iter()
                    .map(|&v| T::from_f64_lossy(1.0 / (v.as_f64() + cfg.eps).sqrt()))
                    .collect(),
            )
        };
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = Vec::with_capacity(xd.len());
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * span;
                let (m, s, gc, bc) = (mean[c], inv_std[c], g[c], bt[c]);
                out.extend(xd[off..off + span].iter().map(|&v| (v - m) * s * gc + bc));
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64_lossy(factor);
        let out = self.value(x).map(|v| v * f);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, f), rg)
    }

    /// Non-overlapping window-2 average over the trailing spatial axes of a
    /// rank-3 (`[B, C, L]`) or rank-4 (`[B, C, H, W]`) input. Odd extents
    /// drop their last element.
    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let (out, shape) = kernels::avgpool2_forward(self.value(x).data(), self.shape(x))?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::AvgPool(x), rg))
    }

    /// Full-extent depthwise convolution: `x: [B, C, S, S]`,
    /// `w: [C, 1, S, S]`, `b: [C]` to `[B, C, 1, 1]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [batch, ch, h, wd] = xs[..] else {
            return Err(Error::shape(format!("depthwise input must be rank 4, got {xs:?}")));
        };
        if ws != [ch, 1, h, wd] {
            return Err(Error::shape(format!(
                "depthwise kernel {ws:?} must cover the full {h}x{wd} extent of {ch} channels"
            )));
        }
        self.weighted_sum(x, w, b, batch, ch, h * wd, vec![batch, ch, 1, 1])
    }

    /// Learnable weighted sum across time: `x: [B, C, L]`, `w: [C, L]` to
    /// `[B, C]`.
    pub fn weighted_avg1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [batch, ch, len] = xs[..] else {
            return Err(Error::shape(format!("weighted_avg1d input must be rank 3, got {xs:?}")));
        };
        if ws != [ch, len] {
            return Err(Error::shape(format!(
                "weighted_avg1d weight {ws:?} does not match input {ch}x{len}"
            )));
        }
        self.weighted_sum(x, w, None, batch, ch, len, vec![batch, ch])
    }

    #[allow(clippy::too_many_arguments)]
    fn weighted_sum(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        ch: usize,
        span: usize,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        if let Some(b) = b {
            if self.shape(b) != [ch] {
                return Err(Error::shape(format!("bias must have shape [{ch}]")));
            }
        }
        let out = kernels::channel_weighted_sum(
            batch,
            ch,
            span,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(out_shape, out)?, Op::WeightedSum { x, w, b }, rg))
    }

    /// Affine map `x W^T + b`: `x: [B, F]`, `w: [O, F]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [batch, fin] = xs[..] else {
            return Err(Error::shape(format!("linear input must be rank 2, got {xs:?}")));
        };
        let [fout, wfin] = ws[..] else {
            return Err(Error::shape(format!("linear weight must be rank 2, got {ws:?}")));
        };
        if wfin != fin {
            return Err(Error::shape(format!(
                "linear dimension mismatch: input has {fin} features, weight expects {wfin}"
            )));
        }
        let mut out = vec![T::zero(); batch * fout];
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::shape(format!("linear bias must have shape [{fout}]")));
            }
            let bd = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bd);
            }
        }
        T::gemm(
            batch,
            fin,
            fout,
            T::one(),
            self.value(x).data(),
            (fin, 1),
            self.value(w).data(),
            (1, fin),
            T::one(),
            &mut out,
            (fout, 1),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(vec![batch, fout], out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("mul: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape(format!(
                "mse_loss: prediction {:?} vs target {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let n = p.len() as f64;
        let s: f64 = p
            .iter()
            .zip(t)
            .map(|(&a, &b)| {
                let d = (a - b).as_f64();
                d * d
            })
            .sum();
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(s / n)), Op::Mse { pred, target }, rg))
    }

    /// Populates gradients of every reachable leaf that requires them.
    /// Gradients accumulate across fan-out; intermediate gradients are
    /// released once propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.value(loss).len();
        if n != 1 {
            return Err(Error::NonScalarLoss(n));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let seed = Tensor::full(self.shape(loss), T::one());
        self.accumulate(loss, seed);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.nodes[id].grad.take() else {
                continue;
            };
            for (v, g) in self.vjp(id, &gy)? {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn vjp(&self, id: usize, gy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[id];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let grads = kernels::conv_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gy.data(),
                    self.rg(*x),
                );
                if let Some(dx) = grads.dx {
                    out.push((*x, Tensor::new(self.shape(*x).to_vec(), dx)?));
                }
                if self.rg(*w) {
                    out.push((*w, Tensor::new(self.shape(*w).to_vec(), grads.dw)?));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    out.push((b, Tensor::new(vec![geom.cout], grads.db)?));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            } => {
                let xs = self.shape(*x);
                let (batch, ch) = (xs[0], xs[1]);
                let span: usize = xs[2..].iter().product();
                let xd = self.value(*x).data();
                let g = self.value(*gamma).data();
                let gyd = gy.data();
                let mut dgamma = vec![0.0f64; ch];
                let mut dbeta = vec![0.0f64; ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let off = (b * ch + c) * span;
                        let (m, s) = (mean[c], inv_std[c]);
                        for i in off..off + span {
                            let xh = ((xd[i] - m) * s).as_f64();
                            let gv = gyd[i].as_f64();
                            dgamma[c] += gv * xh;
                            dbeta[c] += gv;
                        }
                    }
                }
                if self.rg(*x) {
                    let count = (batch * span) as f64;
                    let mut dx = vec![T::zero(); xd.len()];
                    for b in 0..batch {
                        for c in 0..ch {
                            let off = (b * ch + c) * span;
                            let (m, s) = (mean[c], inv_std[c]);
                            let scale = g[c].as_f64() * s.as_f64();
                            for i in off..off + span {
                                let gv = gyd[i].as_f64();
                                dx[i] = T::from_f64_lossy(if *training {
                                    let xh = ((xd[i] - m) * s).as_f64();
                                    scale * (gv - dbeta[c] / count - xh * dgamma[c] / count)
                                } else {
                                    scale * gv
                                });
                            }
                        }
                    }
                    out.push((*x, Tensor::new(xs.to_vec(), dx)?));
                }
                let to_t = |v: Vec<f64>| -> Result<Tensor<T>> {
                    Tensor::new(vec![ch], v.into_iter().map(T::from_f64_lossy).collect())
                };
                if self.rg(*gamma) {
                    out.push((*gamma, to_t(dgamma)?));
                }
                if self.rg(*beta) {
                    out.push((*beta, to_t(dbeta)?));
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let dx = gy
                    .data()
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*x, Tensor::new(gy.shape().to_vec(), dx)?));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = gy.data().iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                out.push((*x, Tensor::new(gy.shape().to_vec(), dx)?));
            }
            Op::Scale(x, f) => out.push((*x, gy.map(|g| g * *f))),
            Op::AvgPool(x) => {
                let dx = kernels::avgpool2_backward(gy.data(), self.shape(*x));
                out.push((*x, Tensor::new(self.shape(*x).to_vec(), dx)?));
            }
            Op::WeightedSum { x, w, b } => {
                let ws = self.shape(*w);
                let ch = ws[0];
                let span: usize = ws[1..].iter().product();
                let batch = gy.len() / ch;
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let gyd = gy.data();
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); xd.len()];
                    for b in 0..batch {
                        for c in 0..ch {
                            let g = gyd[b * ch + c];
                            let off = (b * ch + c) * span;
                            for (d, &wv) in dx[off..off + span].iter_mut().zip(&wd[c * span..]) {
                                *d = g * wv;
                            }
                        }
                    }
                    out.push((*x, Tensor::new(self.shape(*x).to_vec(), dx)?));
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); wd.len()];
                    for b in 0..batch {
                        for c in 0..ch {
                            let g = gyd[b * ch + c];
                            let off = (b * ch + c) * span;
                            for (d, &xv) in dw[c * span..(c + 1) * span].iter_mut().zip(&xd[off..]) {
                                *d += g * xv;
                            }
                        }
                    }
                    out.push((*w, Tensor::new(ws.to_vec(), dw)?));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut db = vec![T::zero(); ch];
                    for row in gyd.chunks(ch) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    out.push((b, Tensor::new(vec![ch], db)?));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (batch, fin) = (xs[0], xs[1]);
                let fout = self.shape(*w)[0];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); batch * fin];
                    // dx = gy [B x O] * W [O x F]
                    T::gemm(
                        batch,
                        fout,
                        fin,
                        T::one(),
                        gy.data(),
                        (fout, 1),
                        self.value(*w).data(),
                        (fin, 1),
                        T::zero(),
                        &mut dx,
                        (fin, 1),
                    );
                    out.push((*x, Tensor::new(xs.to_vec(), dx)?));
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    // dW = gy^T [O x B] * x [B x F]
                    T::gemm(
                        fout,
                        batch,
                        fin,
                        T::one(),
                        gy.data(),
                        (1, fout),
                        self.value(*x).data(),
                        (fin, 1),
                        T::zero(),
                        &mut dw,
                        (fin, 1),
                    );
                    out.push((*w, Tensor::new(vec![fout, fin], dw)?));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut db = vec![T::zero(); fout];
                    for row in gy.data().chunks(fout) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    out.push((b, Tensor::new(vec![fout], db)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, gy.clone()));
                out.push((*b, gy.clone()));
            }
            Op::Mul(a, b) => {
                let times = |other: Var| -> Result<Tensor<T>> {
                    let data = gy
                        .data()
                        .iter()
                        .zip(self.value(other).data())
                        .map(|(&g, &v)| g * v)
                        .collect();
                    Tensor::new(gy.shape().to_vec(), data)
                };
                if self.rg(*a) {
                    out.push((*a, times(*b)?));
                }
                if self.rg(*b) {
                    out.push((*b, times(*a)?));
                }
            }
            Op::Reshape(x) => out.push((*x, gy.clone().reshape(self.shape(*x).to_vec())?)),
            Op::Sum(x) => {
                let g = gy.data()[0];
                out.push((*x, Tensor::full(self.shape(*x), g)));
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let t = self.value(*target).data();
                let k = gy.data()[0] * T::from_f64_lossy(2.0 / p.len() as f64);
                let dp: Vec<T> = p.iter().zip(t).map(|(&a, &b)| (a - b) * k).collect();
                let shape = self.shape(*pred).to_vec();
                if self.rg(*target) {
                    let dt = dp.iter().map(|&v| -v).collect();
                    out.push((*target, Tensor::new(shape.clone(), dt)?));
                }
                out.push((*pred, Tensor::new(shape, dp)?));
            }
        }
        Ok(out)
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
