//! Minimal reverse-mode autodiff engine: enough operators to build, train
//! and verify the residual audio networks. Nodes form a tape in creation
//! order (inputs always precede consumers), so backward is a reverse sweep.
//!
//! Numeric conventions that tests rely on:
//! - conv2d accumulates contributions per output element in (in_channel,
//!   kernel_freq, kernel_time) order, exactly like the nested-loop oracle;
//! - linear accumulates over inputs in ascending index order, bias added last;
//! - BatchNorm statistics and loss reductions accumulate in f64 regardless of
//!   the element type.

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum Op<E: Elem> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    BatchNorm2d {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        /// Per-channel statistics actually used for normalization (batch
        /// stats in train mode, running stats in eval mode).
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        /// Biased batch variance, recorded in train mode for running-stat
        /// updates outside the graph.
        batch_var: Vec<f64>,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    GlobalPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    SigmoidBce {
        logits: NodeId,
        targets: Tensor<E>,
    },
    SoftmaxCe {
        logits: NodeId,
        targets: Tensor<E>,
        probs: Tensor<E>,
    },
}

#[derive(Debug)]
struct Node<E: Elem> {
    op: Op<E>,
    value: Tensor<E>,
    grad: Option<Tensor<E>>,
    requires: bool,
}

/// Reverse-mode tape. Build ops forward, call [`Graph::backward`] on a
/// scalar node, then read leaf gradients with [`Graph::grad`].
#[derive(Debug, Default)]
pub struct Graph<E: Elem> {
    nodes: Vec<Node<E>>,
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op<E>, value: Tensor<E>, requires: bool) -> NodeId {
        self.nodes.push(Node { op, value, grad: None, requires });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<E>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    /// Leaf gradients survive backward; interior gradients are consumed.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires
    }

    /// Batch statistics (mean, biased variance) recorded by a train-mode
    /// batchnorm node, for folding into running statistics.
    /// Per-channel batch mean and biased variance from a train-mode
    /// BatchNorm node, plus the per-channel reduce count (for unbiasing).
    pub fn bn_batch_stats(&self, id: NodeId) -> Option<(Vec<f64>, Vec<f64>, usize)> {
        match &self.nodes[id.0].op {
            Op::BatchNorm2d { x, mean, batch_var, .. } if !batch_var.is_empty() => {
                let xv = &self.nodes[x.0].value;
                let count = xv.numel() / xv.shape()[1];
                Some((mean.clone(), batch_var.clone(), count))
            }
            _ => None,
        }
    }

    // ---- forward ops ----

    /// 2-D cross-correlation, no bias. Output spatial size per axis:
    /// floor((S + 2p − k)/stride) + 1.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<NodeId> {
        let (bsz, ic, fh, tw) = self.nodes[x.0].value.dims4();
        let (oc, wic, kf, kt) = self.nodes[w.0].value.dims4();
        if wic != ic {
            return Err(Error::InvalidShape(format!(
                "conv2d channel mismatch: input {ic}, kernel expects {wic}"
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidShape("conv2d stride must be positive".into()));
        }
        let (fp, tp) = (fh + 2 * pad.0, tw + 2 * pad.1);
        if kf > fp || kt > tp {
            return Err(Error::InvalidShape(format!(
                "kernel {kf}x{kt} exceeds padded input {fp}x{tp}"
            )));
        }
        let of = (fp - kf) / stride.0 + 1;
        let ot = (tp - kt) / stride.1 + 1;

        let xpad = pad_4d(&self.nodes[x.0].value, pad);
        let wt = &self.nodes[w.0].value;
        let mut out = Tensor::zeros(&[bsz, oc, of, ot]);
        conv2d_forward_into(
            &xpad, bsz, ic, fp, tp, &wt.data, oc, kf, kt, stride, of, ot, &mut out.data,
        );
        let requires = self.requires(x) || self.requires(w);
        Ok(self.push(Op::Conv2d { x, w, stride, pad }, out, requires))
    }

    /// BatchNorm over channels of a 4-D tensor. Train mode normalizes by
    /// batch statistics and records them (running stats are updated by the
    /// caller); eval mode normalizes by the provided running statistics and
    /// never mutates anything.
    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        mode: BnMode,
        eps: f64,
    ) -> Result<NodeId> {
        let (bsz, c, fh, tw) = self.nodes[x.0].value.dims4();
        if self.nodes[gamma.0].value.numel() != c || self.nodes[beta.0].value.numel() != c {
            return Err(Error::InvalidShape(format!(
                "batchnorm expects {c}-channel gamma/beta, got {}/{}",
                self.nodes[gamma.0].value.numel(),
                self.nodes[beta.0].value.numel()
            )));
        }
        if mode == BnMode::Eval && (running_mean.len() != c || running_var.len() != c) {
            return Err(Error::InvalidShape("running stats length mismatch".into()));
        }
        let plane = fh * tw;
        let m = bsz * plane;
        let xv = &self.nodes[x.0].value.data;

        let (mean, var, batch_var) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for b in 0..bsz {
                        let base = (b * c + ch) * plane;
                        for i in 0..plane {
                            acc += xv[base + i].to_f64();
                        }
                    }
                    let mu = acc / m as f64;
                    let mut acc2 = 0.0f64;
                    for b in 0..bsz {
                        let base = (b * c + ch) * plane;
                        for i in 0..plane {
                            let d = xv[base + i].to_f64() - mu;
                            acc2 += d * d;
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = acc2 / m as f64; // biased
                }
                let bv = var.clone();
                (mean, var, bv)
            }
            BnMode::Eval => (running_mean.to_vec(), running_var.to_vec(), Vec::new()),
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v.max(0.0) + eps).sqrt()).collect();

        let gv = &self.nodes[gamma.0].value.data;
        let bv = &self.nodes[beta.0].value.data;
        let mut out = Tensor::zeros(self.nodes[x.0].value.shape());
        for b in 0..bsz {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let g = gv[ch].to_f64() * inv_std[ch];
                let off = bv[ch].to_f64() - mean[ch] * g;
                for i in 0..plane {
                    out.data[base + i] = E::from_f64(xv[base + i].to_f64() * g + off);
                }
            }
        }
        let requires = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Op::BatchNorm2d { x, gamma, beta, mean, inv_std, batch_var },
            out,
            requires,
        ))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let s = E::from_f64(slope);
        let value = self.nodes[x.0].value.map(|v| if v >= E::ZERO { v } else { s * v });
        let requires = self.requires(x);
        self.push(Op::LeakyRelu { x, slope }, value, requires)
    }

    /// y = x·Wᵀ + b for x: [batch, in], w: [out, in], b: [out].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (bsz, nin) = self.nodes[x.0].value.dims2();
        let (nout, win) = self.nodes[w.0].value.dims2();
        if win != nin || self.nodes[b.0].value.numel() != nout {
            return Err(Error::InvalidShape(format!(
                "linear shapes: x[.,{nin}], w[{nout},{win}], b[{}]",
                self.nodes[b.0].value.numel()
            )));
        }
        let xv = &self.nodes[x.0].value.data;
        let wv = &self.nodes[w.0].value.data;
        let biasv = &self.nodes[b.0].value.data;
        let mut out = Tensor::zeros(&[bsz, nout]);
        for bi in 0..bsz {
            for o in 0..nout {
                let mut acc = E::ZERO;
                let xrow = &xv[bi * nin..(bi + 1) * nin];
                let wrow = &wv[o * nin..(o + 1) * nin];
                for i in 0..nin {
                    acc += xrow[i] * wrow[i];
                }
                out.data[bi * nout + o] = acc + biasv[o];
            }
        }
        let requires = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(Op::Linear { x, w, b }, out, requires))
    }

    /// Per-channel mean-plus-max over the spatial field: [b,c,f,t] → [b,c].
    pub fn global_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (bsz, c, fh, tw) = self.nodes[x.0].value.dims4();
        let plane = fh * tw;
        if plane == 0 {
            return Err(Error::InvalidShape("global_pool needs a nonempty field".into()));
        }
        let xv = &self.nodes[x.0].value.data;
        let mut out = Tensor::zeros(&[bsz, c]);
        let mut argmax = vec![0usize; bsz * c];
        for b in 0..bsz {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let mut acc = 0.0f64;
                let mut best = xv[base];
                let mut best_i = 0usize;
                for i in 0..plane {
                    let v = xv[base + i];
                    acc += v.to_f64();
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                out.data[b * c + ch] = E::from_f64(acc / plane as f64) + best;
                argmax[b * c + ch] = base + best_i;
            }
        }
        let requires = self.requires(x);
        Ok(self.push(Op::GlobalPool { x, argmax }, out, requires))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(Error::InvalidShape(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = av.clone();
        for (o, &v) in out.data.iter_mut().zip(&bv.data) {
            *o += v;
        }
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add { a, b }, out, requires))
    }

    /// Shape reinterpretation (no data movement).
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        let requires = self.requires(x);
        Ok(self.push(Op::Reshape { x }, value, requires))
    }

    /// Mean over batch×classes of the numerically fused sigmoid +
    /// binary-cross-entropy: max(z,0) − z·y + ln(1+e^−|z|).
    pub fn sigmoid_bce_loss(&mut self, logits: NodeId, targets: Tensor<E>) -> Result<NodeId> {
        let shape = self.nodes[logits.0].value.shape().to_vec();
        if targets.shape() != shape.as_slice() {
            return Err(Error::InvalidShape("loss target shape mismatch".into()));
        }
        validate_targets(&targets)?;
        let zv = &self.nodes[logits.0].value.data;
        let mut acc = 0.0f64;
        for (z, y) in zv.iter().zip(&targets.data) {
            let z = z.to_f64();
            let y = y.to_f64();
            acc += z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln();
        }
        let loss = E::from_f64(acc / zv.len() as f64);
        let requires = self.requires(logits);
        Ok(self.push(Op::SigmoidBce { logits, targets }, Tensor::scalar(loss), requires))
    }

    /// Mean over the batch of soft-target cross-entropy under a softmax,
    /// computed through the log-sum-exp for stability.
    pub fn softmax_ce_loss(&mut self, logits: NodeId, targets: Tensor<E>) -> Result<NodeId> {
        let (bsz, n) = self.nodes[logits.0].value.dims2();
        if targets.shape() != [bsz, n] {
            return Err(Error::InvalidShape("loss target shape mismatch".into()));
        }
        validate_targets(&targets)?;
        let zv = &self.nodes[logits.0].value.data;
        let mut probs = Tensor::zeros(&[bsz, n]);
        let mut acc = 0.0f64;
        for b in 0..bsz {
            let row = &zv[b * n..(b + 1) * n];
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
            let mut denom = 0.0f64;
            for v in row {
                denom += (v.to_f64() - mx).exp();
            }
            let lse = mx + denom.ln();
            let trow = &targets.data[b * n..(b + 1) * n];
            for i in 0..n {
                let p = (row[i].to_f64() - lse).exp();
                probs.data[b * n + i] = E::from_f64(p);
                acc += trow[i].to_f64() * (lse - row[i].to_f64());
            }
        }
        let loss = E::from_f64(acc / bsz as f64);
        let requires = self.requires(logits);
        Ok(self.push(Op::SoftmaxCe { logits, targets, probs }, Tensor::scalar(loss), requires))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar output. Leaf gradients accumulate and
    /// survive; interior gradients are consumed as the sweep passes them.
    pub fn backward(&mut self, out: NodeId) -> Result<()> {
        if self.nodes[out.0].value.numel() != 1 {
            return Err(Error::Internal("backward needs a scalar output".into()));
        }
        let shape = self.nodes[out.0].value.shape().to_vec();
        self.nodes[out.0].grad = Some(Tensor::full(&shape, E::ONE));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires || self.nodes[i].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let dy = self.nodes[i].grad.take().expect("checked above");
            let deltas = self.op_backward(i, &dy)?;
            for (id, delta) in deltas {
                if self.requires(id) {
                    self.accumulate(id, delta);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor<E>) {
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                for (a, &d) in g.data.iter_mut().zip(&delta.data) {
                    *a += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    /// Compute input gradients for node `i` given its upstream gradient.
    fn op_backward(&self, i: usize, dy: &Tensor<E>) -> Result<Vec<(NodeId, Tensor<E>)>> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => Ok(Vec::new()),
            Op::Conv2d { x, w, stride, pad } => {
                let xt = &self.nodes[x.0].value;
                let wt = &self.nodes[w.0].value;
                let (dx, dw) = conv2d_backward(
                    xt,
                    wt,
                    dy,
                    *stride,
                    *pad,
                    self.requires(*x),
                    self.requires(*w),
                );
                let mut out = Vec::new();
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
                Ok(out)
            }
            Op::BatchNorm2d { x, gamma, beta, mean, inv_std, batch_var } => {
                let xt = &self.nodes[x.0].value;
                let gt = &self.nodes[gamma.0].value;
                let (bsz, c, fh, tw) = xt.dims4();
                let plane = fh * tw;
                let m = (bsz * plane) as f64;
                let train = !batch_var.is_empty();

                // per-channel reductions in f64
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for b in 0..bsz {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for idx in 0..plane {
                            let d = dy.data[base + idx].to_f64();
                            let xhat = (xt.data[base + idx].to_f64() - mean[ch]) * inv_std[ch];
                            sum_dy[ch] += d;
                            sum_dy_xhat[ch] += d * xhat;
                        }
                    }
                }

                let mut out = Vec::new();
                if self.requires(*x) {
                    let mut dx = Tensor::zeros(xt.shape());
                    for b in 0..bsz {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            let g = gt.data[ch].to_f64() * inv_std[ch];
                            for idx in 0..plane {
                                let d = dy.data[base + idx].to_f64();
                                let v = if train {
                                    let xhat = (xt.data[base + idx].to_f64() - mean[ch])
                                        * inv_std[ch];
                                    g * (d - sum_dy[ch] / m - xhat * sum_dy_xhat[ch] / m)
                                } else {
                                    g * d
                                };
                                dx.data[base + idx] = E::from_f64(v);
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if self.requires(*gamma) {
                    let shape = self.nodes[gamma.0].value.shape().to_vec();
                    let mut dg = Tensor::zeros(&shape);
                    for ch in 0..c {
                        dg.data[ch] = E::from_f64(sum_dy_xhat[ch]);
                    }
                    out.push((*gamma, dg));
                }
                if self.requires(*beta) {
                    let shape = self.nodes[beta.0].value.shape().to_vec();
                    let mut db = Tensor::zeros(&shape);
                    for ch in 0..c {
                        db.data[ch] = E::from_f64(sum_dy[ch]);
                    }
                    out.push((*beta, db));
                }
                Ok(out)
            }
            Op::LeakyRelu { x, slope } => {
                let xt = &self.nodes[x.0].value;
                let s = E::from_f64(*slope);
                let mut dx = Tensor::zeros(xt.shape());
                for i in 0..dx.data.len() {
                    let gate = if xt.data[i] >= E::ZERO { E::ONE } else { s };
                    dx.data[i] = dy.data[i] * gate;
                }
                Ok(vec![(*x, dx)])
            }
            Op::Linear { x, w, b } => {
                let xt = &self.nodes[x.0].value;
                let wt = &self.nodes[w.0].value;
                let (bsz, nin) = xt.dims2();
                let (nout, _) = wt.dims2();
                let mut out = Vec::new();
                if self.requires(*x) {
                    let mut dx = Tensor::zeros(&[bsz, nin]);
                    for bi in 0..bsz {
                        for o in 0..nout {
                            let d = dy.data[bi * nout + o];
                            let wrow = &wt.data[o * nin..(o + 1) * nin];
                            let drow = &mut dx.data[bi * nin..(bi + 1) * nin];
                            for i in 0..nin {
                                drow[i] += d * wrow[i];
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if self.requires(*w) {
                    let mut dw = Tensor::zeros(&[nout, nin]);
                    for bi in 0..bsz {
                        let xrow = &xt.data[bi * nin..(bi + 1) * nin];
                        for o in 0..nout {
                            let d = dy.data[bi * nout + o];
                            let wrow = &mut dw.data[o * nin..(o + 1) * nin];
                            for i in 0..nin {
                                wrow[i] += d * xrow[i];
                            }
                        }
                    }
                    out.push((*w, dw));
                }
                if self.requires(*b) {
                    let shape = self.nodes[b.0].value.shape().to_vec();
                    let mut db = Tensor::zeros(&shape);
                    for bi in 0..bsz {
                        for o in 0..nout {
                            db.data[o] += dy.data[bi * nout + o];
                        }
                    }
                    out.push((*b, db));
                }
                Ok(out)
            }
            Op::GlobalPool { x, argmax } => {
                let xt = &self.nodes[x.0].value;
                let (bsz, c, fh, tw) = xt.dims4();
                let plane = fh * tw;
                let inv = E::from_f64(1.0 / plane as f64);
                let mut dx = Tensor::zeros(xt.shape());
                for b in 0..bsz {
                    for ch in 0..c {
                        let d = dy.data[b * c + ch];
                        let base = (b * c + ch) * plane;
                        let spread = d * inv;
                        for i in 0..plane {
                            dx.data[base + i] += spread;
                        }
                        dx.data[argmax[b * c + ch]] += d;
                    }
                }
                Ok(vec![(*x, dx)])
            }
            Op::Add { a, b } => Ok(vec![(*a, dy.clone()), (*b, dy.clone())]),
            Op::Reshape { x } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                Ok(vec![(*x, dy.clone().reshaped(&shape)?)])
            }
            Op::SigmoidBce { logits, targets } => {
                let zt = &self.nodes[logits.0].value;
                let scale = dy.data[0].to_f64() / zt.numel() as f64;
                let mut dz = Tensor::zeros(zt.shape());
                for i in 0..dz.data.len() {
                    let z = zt.data[i].to_f64();
                    let sig = stable_sigmoid(z);
                    dz.data[i] = E::from_f64((sig - targets.data[i].to_f64()) * scale);
                }
                Ok(vec![(*logits, dz)])
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                let zt = &self.nodes[logits.0].value;
                let (bsz, n) = zt.dims2();
                let scale = dy.data[0].to_f64() / bsz as f64;
                let mut dz = Tensor::zeros(zt.shape());
                for b in 0..bsz {
                    let trow = &targets.data[b * n..(b + 1) * n];
                    let s: f64 = trow.iter().map(|v| v.to_f64()).sum();
                    for i in 0..n {
                        let p = probs.data[b * n + i].to_f64();
                        let y = trow[i].to_f64();
                        dz.data[b * n + i] = E::from_f64((p * s - y) * scale);
                    }
                }
                Ok(vec![(*logits, dz)])
            }
        }
    }
}

fn validate_targets<E: Elem>(targets: &Tensor<E>) -> Result<()> {
    for v in &targets.data {
        let v = v.to_f64();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidInput(format!("loss target {v} outside [0, 1]")));
        }
    }
    Ok(())
}

pub fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Head activation on raw logits (outside the graph; not differentiated).
pub fn sigmoid_probs<E: Elem>(logits: &Tensor<E>) -> Tensor<E> {
    logits.map(|z| E::from_f64(stable_sigmoid(z.to_f64())))
}

pub fn softmax_probs<E: Elem>(logits: &Tensor<E>) -> Tensor<E> {
    let (bsz, n) = logits.dims2();
    let mut out = Tensor::zeros(&[bsz, n]);
    for b in 0..bsz {
        let row = &logits.data[b * n..(b + 1) * n];
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
        let mut denom = 0.0f64;
        for v in row {
            denom += (v.to_f64() - mx).exp();
        }
        for i in 0..n {
            out.data[b * n + i] = E::from_f64((row[i].to_f64() - mx).exp() / denom);
        }
    }
    out
}

fn pad_4d<E: Elem>(x: &Tensor<E>, pad: (usize, usize)) -> Vec<E> {
    let (bsz, c, fh, tw) = x.dims4();
    let (fp, tp) = (fh + 2 * pad.0, tw + 2 * pad.1);
    if pad == (0, 0) {
        return x.data.clone();
    }
    let mut out = vec![E::ZERO; bsz * c * fp * tp];
    for bc in 0..bsz * c {
        let src = bc * fh * tw;
        let dst = bc * fp * tp;
        for f in 0..fh {
            let s = src + f * tw;
            let d = dst + (f + pad.0) * tp + pad.1;
            out[d..d + tw].copy_from_slice(&x.data[s..s + tw]);
        }
    }
    out
}

/// Forward kernel. Per output element the accumulation order is exactly
/// (ic, kf, kt); the row-sweep formulation only vectorizes across output
/// positions, which leaves each element's addition sequence untouched.
#[allow(clippy::too_many_arguments)]
fn conv2d_forward_into<E: Elem>(
    xpad: &[E],
    bsz: usize,
    ic: usize,
    fp: usize,
    tp: usize,
    w: &[E],
    oc: usize,
    kf: usize,
    kt: usize,
    stride: (usize, usize),
    of: usize,
    ot: usize,
    out: &mut [E],
) {
    let (sf, st) = stride;
    for b in 0..bsz {
        for o in 0..oc {
            let acc = &mut out[(b * oc + o) * of * ot..(b * oc + o + 1) * of * ot];
            for c in 0..ic {
                let xbase = (b * ic + c) * fp * tp;
                let wbase = (o * ic + c) * kf * kt;
                for dkf in 0..kf {
                    for dkt in 0..kt {
                        let wv = w[wbase + dkf * kt + dkt];
                        for row in 0..of {
                            let xrow = xbase + (row * sf + dkf) * tp + dkt;
                            let arow = &mut acc[row * ot..(row + 1) * ot];
                            if st == 1 {
                                let xs = &xpad[xrow..xrow + ot];
                                for (a, &xv) in arow.iter_mut().zip(xs) {
                                    *a += wv * xv;
                                }
                            } else {
                                for (i, a) in arow.iter_mut().enumerate() {
                                    *a += wv * xpad[xrow + i * st];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Multi-accumulator dot product over `a[i]·b[i*stride]`: deterministic
/// (fixed association) and wide enough to vectorize.
fn dot_strided<E: Elem>(a: &[E], b: &[E], stride: usize) -> E {
    const LANES: usize = 8;
    let mut lanes = [E::ZERO; LANES];
    let n = a.len();
    let chunks = n / LANES;
    if stride == 1 {
        for ch in 0..chunks {
            let ab = &a[ch * LANES..(ch + 1) * LANES];
            let bb = &b[ch * LANES..(ch + 1) * LANES];
            for j in 0..LANES {
                lanes[j] += ab[j] * bb[j];
            }
        }
    } else {
        for ch in 0..chunks {
            for j in 0..LANES {
                let i = ch * LANES + j;
                lanes[j] += a[i] * b[i * stride];
            }
        }
    }
    let mut tail = E::ZERO;
    for i in chunks * LANES..n {
        tail += a[i] * b[i * stride];
    }
    let mut acc = E::ZERO;
    for l in lanes {
        acc += l;
    }
    acc + tail
}

fn conv2d_backward<E: Elem>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    dy: &Tensor<E>,
    stride: (usize, usize),
    pad: (usize, usize),
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<E>>, Option<Tensor<E>>) {
    let (bsz, ic, fh, tw) = x.dims4();
    let (oc, _, kf, kt) = w.dims4();
    let (_, _, of, ot) = dy.dims4();
    let (sf, st) = stride;
    let (fp, tp) = (fh + 2 * pad.0, tw + 2 * pad.1);
    let xpad = pad_4d(x, pad);

    let dw = if need_dw {
        let mut dw = Tensor::zeros(w.shape());
        for b in 0..bsz {
            for o in 0..oc {
                let dyrow = &dy.data[(b * oc + o) * of * ot..(b * oc + o + 1) * of * ot];
                for c in 0..ic {
                    let xbase = (b * ic + c) * fp * tp;
                    let wbase = (o * ic + c) * kf * kt;
                    for dkf in 0..kf {
                        for dkt in 0..kt {
                            let mut acc = E::ZERO;
                            for row in 0..of {
                                let xrow = xbase + (row * sf + dkf) * tp + dkt;
                                acc += dot_strided(
                                    &dyrow[row * ot..(row + 1) * ot],
                                    &xpad[xrow..],
                                    st,
                                );
                            }
                            dw.data[wbase + dkf * kt + dkt] += acc;
                        }
                    }
                }
            }
        }
        Some(dw)
    } else {
        None
    };

    let dx = if need_dx {
        let mut dxpad = vec![E::ZERO; bsz * ic * fp * tp];
        for b in 0..bsz {
            for o in 0..oc {
                let dyrow = &dy.data[(b * oc + o) * of * ot..(b * oc + o + 1) * of * ot];
                for c in 0..ic {
                    let xbase = (b * ic + c) * fp * tp;
                    let wbase = (o * ic + c) * kf * kt;
                    for dkf in 0..kf {
                        for dkt in 0..kt {
                            let wv = w.data[wbase + dkf * kt + dkt];
                            for row in 0..of {
                                let xrow = xbase + (row * sf + dkf) * tp + dkt;
                                let drow = &dyrow[row * ot..(row + 1) * ot];
                                if st == 1 {
                                    let xs = &mut dxpad[xrow..xrow + ot];
                                    for (xv, &d) in xs.iter_mut().zip(drow) {
                                        *xv += wv * d;
                                    }
                                } else {
                                    for (i, &d) in drow.iter().enumerate() {
                                        dxpad[xrow + i * st] += wv * d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        // strip padding
        let mut dx = Tensor::zeros(x.shape());
        for bc in 0..bsz * ic {
            let dst = bc * fh * tw;
            let src = bc * fp * tp;
            for f in 0..fh {
                let s = src + (f + pad.0) * tp + pad.1;
                let d = dst + f * tw;
                dx.data[d..d + tw].copy_from_slice(&dxpad[s..s + tw]);
            }
        }
        Some(dx)
    } else {
        None
    };

    (dx, dw)
}

// ---- finite-difference verification ----

/// Outcome of a finite-difference sweep: the worst relative error seen and
/// where it happened.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checks: usize,
}

impl GradCheckReport {
    pub(crate) fn absorb(&mut self, rel: f64, what: String) {
        self.checks += 1;
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = what;
        }
    }
}

/// Relative error with a measurement floor: values below `floor` are
/// compared on an absolute scale of `floor` instead, because central
/// differences at ε = 1e-3 cannot resolve gradients much below the FD
/// truncation noise. A floor of 1e-2 together with a relative tolerance τ
/// is equivalent to the allclose criterion rtol = τ, atol = τ·1e-2 (the
/// same atol/rtol ratio the conv2d contract uses).
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Default measurement floor for [`rel_err`] / [`grad_check`].
pub const GRADCHECK_FLOOR: f64 = 1e-2;

/// Compare analytic gradients against central finite differences on a
/// sampled subset of coordinates per parameter tensor.
///
/// `loss` evaluates the scalar objective for a parameter vector; `grads`
/// returns the analytic gradient per parameter (same order). `floor` is the
/// magnitude below which gradients are treated as zero (FD noise floor).
pub fn grad_check<E: Elem>(
    params: &[Tensor<E>],
    names: &[String],
    loss: &mut dyn FnMut(&[Tensor<E>]) -> Result<f64>,
    grads: &mut dyn FnMut(&[Tensor<E>]) -> Result<Vec<Tensor<E>>>,
    eps: f64,
    coords_per_tensor: usize,
    floor: f64,
    rng: &mut crate::augment::RngStream,
) -> Result<GradCheckReport> {
    let analytic = grads(params)?;
    if analytic.len() != params.len() {
        return Err(Error::Internal("grad count mismatch".into()));
    }
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: String::new(), checks: 0 };
    let mut work: Vec<Tensor<E>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let mut coords: Vec<usize> = if n <= coords_per_tensor {
            (0..n).collect()
        } else {
            (0..coords_per_tensor).map(|_| rng.upto(n - 1)).collect()
        };
        coords.sort_unstable();
        coords.dedup();
        for &ci in &coords {
            let orig = work[pi].data[ci];
            work[pi].data[ci] = orig + E::from_f64(eps);
            let lp = loss(&work)?;
            work[pi].data[ci] = orig - E::from_f64(eps);
            let lm = loss(&work)?;
            work[pi].data[ci] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = analytic[pi].data[ci].to_f64();
            let rel = rel_err(an, fd, floor);
            report.absorb(rel, format!("{}[{ci}]: analytic {an:e} vs fd {fd:e}", names[pi]));
        }
    }
    Ok(report)
}
