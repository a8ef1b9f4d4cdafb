//! ERANN architecture: stage/block plan from (W, s_m, N), parameter and MAC
//! accounting, initialization, forward graph assembly, and transfer of
//! pretrained weights onto a new head.

use crate::augment::RngStream;
use crate::dsp::LogMelSpec;
use crate::error::{Error, Result};
use crate::graph::{sigmoid_probs, softmax_probs, BnMode, Graph, NodeId};
use crate::tensor::{Elem, Tensor};

pub const MEL_BINS: usize = 128;
pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
const STAGES: usize = 5;
const ARBS_PER_STAGE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Sigmoid,
    Softmax,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Sigmoid => "sigmoid",
            Head::Softmax => "softmax",
        }
    }
}

impl std::str::FromStr for Head {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Head::Sigmoid),
            "softmax" => Ok(Head::Softmax),
            other => Err(Error::InvalidConfig(format!("unknown head '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErannConfig {
    pub w: usize,
    pub s_m: usize,
    pub n_classes: usize,
    pub head: Head,
}

impl ErannConfig {
    pub fn new(w: usize, s_m: usize, n_classes: usize, head: Head) -> Result<Self> {
        let cfg = ErannConfig { w, s_m, n_classes, head };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w < 1 {
            return Err(Error::InvalidConfig("widening factor W must be >= 1".into()));
        }
        if self.s_m > 3 {
            return Err(Error::InvalidConfig(format!("s_m must be in 0..=3, got {}", self.s_m)));
        }
        if self.n_classes < 1 {
            return Err(Error::InvalidConfig("n_classes must be >= 1".into()));
        }
        Ok(())
    }

    /// Conventional model name, e.g. ERANN-2-4 for s_m = 2, W = 4.
    pub fn name(&self) -> String {
        format!("ERANN-{}-{}", self.s_m, self.w)
    }

    /// Embedding width after pooling (= channels of the last stage).
    pub fn embed_dim(&self) -> usize {
        128 * self.w
    }
}

/// Temporal strides of stages 1..3: s_i = 4 for i <= s_m, else 2.
pub fn stride_schedule(s_m: usize) -> Result<(usize, usize, usize)> {
    if s_m > 3 {
        return Err(Error::InvalidConfig(format!("s_m must be in 0..=3, got {s_m}")));
    }
    let s = |i: usize| if i <= s_m { 4 } else { 2 };
    Ok((s(1), s(2), s(3)))
}

/// Temporal sizes after stages 1..4 for an input of T0 frames.
pub fn temporal_sizes(t0: usize, s_m: usize) -> Result<(usize, usize, usize, usize)> {
    if t0 == 0 || t0 % 128 != 0 {
        return Err(Error::InvalidConfig(format!("T0 must be a positive multiple of 128, got {t0}")));
    }
    let (s1, s2, s3) = stride_schedule(s_m)?;
    let t1 = t0 / s1;
    let t2 = t1 / s2;
    let t3 = t2 / s3;
    let t4 = t3 / 2;
    Ok((t1, t2, t3, t4))
}

/// Kernel sizes and padding as a function of the stride along one axis.
pub fn arb_kernel_params(z: usize) -> Result<(usize, usize, usize)> {
    match z {
        1 | 2 => Ok((3, 3, 1)),
        4 => Ok((6, 5, 2)),
        other => Err(Error::InvalidConfig(format!("stride {other} has no kernel mapping"))),
    }
}

/// One audio residual block, with parameter/buffer slots resolved.
#[derive(Debug, Clone)]
pub struct ArbPlan {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    /// (freq, time) stride of conv1 and of the projection.
    pub stride: (usize, usize),
    /// False only for the very first block of the network.
    pub pre_activation: bool,
    pub projection: bool,
    pub k1: (usize, usize),
    pub k2: (usize, usize),
    pub p2: (usize, usize),
    pub pre_bn: Option<BnSlot>,
    pub conv1: usize,
    pub mid_bn: BnSlot,
    pub conv2: usize,
    pub proj: Option<usize>,
}

/// Indices of a BatchNorm's learnables (gamma, beta) and running buffers.
#[derive(Debug, Clone, Copy)]
pub struct BnSlot {
    pub gamma: usize,
    pub beta: usize,
    pub buf: usize,
}

#[derive(Debug, Clone)]
pub struct ModelPlan {
    pub extractor_bn: BnSlot,
    pub arbs: Vec<ArbPlan>,
    /// Index of the last block of each stage into `arbs`.
    pub stage_ends: Vec<usize>,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
    pub param_names: Vec<String>,
    pub param_shapes: Vec<Vec<usize>>,
    pub bn_names: Vec<String>,
    pub bn_channels: Vec<usize>,
}

impl ModelPlan {
    pub fn new(config: &ErannConfig) -> Result<Self> {
        config.validate()?;
        let (s1, s2, s3) = stride_schedule(config.s_m)?;
        let stage_tstride = [1, s1, s2, s3, 2];

        let mut param_names = Vec::new();
        let mut param_shapes = Vec::new();
        let mut bn_names = Vec::new();
        let mut bn_channels = Vec::new();
        let mut push_param = |name: String, shape: Vec<usize>| -> usize {
            param_names.push(name);
            param_shapes.push(shape);
            param_names.len() - 1
        };
        let push_bn = |pn: &mut dyn FnMut(String, Vec<usize>) -> usize,
                           bn_names: &mut Vec<String>,
                           bn_channels: &mut Vec<usize>,
                           name: &str,
                           ch: usize|
         -> BnSlot {
            let gamma = pn(format!("{name}.gamma"), vec![ch]);
            let beta = pn(format!("{name}.beta"), vec![ch]);
            bn_names.push(name.to_string());
            bn_channels.push(ch);
            BnSlot { gamma, beta, buf: bn_names.len() - 1 }
        };

        let extractor_bn =
            push_bn(&mut push_param, &mut bn_names, &mut bn_channels, "extractor_bn", MEL_BINS);

        let mut arbs = Vec::new();
        let mut stage_ends = Vec::new();
        let mut in_ch = 1usize;
        for stage in 0..STAGES {
            let out_ch = 8 * config.w << stage;
            for i in 0..ARBS_PER_STAGE {
                let name = format!("stage{stage}.arb{i}");
                let (x, y) = if stage == 0 || i > 0 { (1, 1) } else { (2, stage_tstride[stage]) };
                let pre_activation = !(stage == 0 && i == 0);
                let projection = (x, y) != (1, 1) || in_ch != out_ch;
                let (k1x, k2x, px) = arb_kernel_params(x)?;
                let (k1y, k2y, py) = arb_kernel_params(y)?;
                let pre_bn = if pre_activation {
                    Some(push_bn(
                        &mut push_param,
                        &mut bn_names,
                        &mut bn_channels,
                        &format!("{name}.pre_bn"),
                        in_ch,
                    ))
                } else {
                    None
                };
                let conv1 = push_param(format!("{name}.conv1.weight"), vec![out_ch, in_ch, k1x, k1y]);
                let mid_bn = push_bn(
                    &mut push_param,
                    &mut bn_names,
                    &mut bn_channels,
                    &format!("{name}.mid_bn"),
                    out_ch,
                );
                let conv2 = push_param(format!("{name}.conv2.weight"), vec![out_ch, out_ch, k2x, k2y]);
                let proj = if projection {
                    Some(push_param(format!("{name}.proj.weight"), vec![out_ch, in_ch, 1, 1]))
                } else {
                    None
                };
                arbs.push(ArbPlan {
                    name,
                    in_ch,
                    out_ch,
                    stride: (x, y),
                    pre_activation,
                    projection,
                    k1: (k1x, k1y),
                    k2: (k2x, k2y),
                    p2: (px, py),
                    pre_bn,
                    conv1,
                    mid_bn,
                    conv2,
                    proj,
                });
                in_ch = out_ch;
            }
            stage_ends.push(arbs.len() - 1);
        }

        let d = config.embed_dim();
        let fc1_w = push_param("fc1.weight".into(), vec![d, d]);
        let fc1_b = push_param("fc1.bias".into(), vec![d]);
        let fc2_w = push_param("fc2.weight".into(), vec![config.n_classes, d]);
        let fc2_b = push_param("fc2.bias".into(), vec![config.n_classes]);

        Ok(ModelPlan {
            extractor_bn,
            arbs,
            stage_ends,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            param_names,
            param_shapes,
            bn_names,
            bn_channels,
        })
    }
}

/// Running statistics of one BatchNorm layer. Stored in f32 so checkpoint
/// round-trips are bit-exact; widened to f64 at use.
#[derive(Debug, Clone)]
pub struct BnBuffers {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BnBuffers {
    pub fn mean_f64(&self) -> Vec<f64> {
        self.running_mean.iter().map(|&v| v as f64).collect()
    }

    pub fn var_f64(&self) -> Vec<f64> {
        self.running_var.iter().map(|&v| v as f64).collect()
    }
}

/// All model state: learnable tensors (ordered per plan) plus BatchNorm
/// running buffers.
#[derive(Debug, Clone)]
pub struct ModelState<E: Elem> {
    pub config: ErannConfig,
    pub plan: ModelPlan,
    pub params: Vec<Tensor<E>>,
    pub bn: Vec<BnBuffers>,
}

impl<E: Elem> ModelState<E> {
    /// Zero-initialized state (weights all zero, running stats mean 0/var 1).
    pub fn new(config: ErannConfig) -> Result<Self> {
        let plan = ModelPlan::new(&config)?;
        let params = plan.param_shapes.iter().map(|s| Tensor::zeros(s)).collect();
        let bn = plan
            .bn_channels
            .iter()
            .map(|&c| BnBuffers { running_mean: vec![0.0; c], running_var: vec![1.0; c] })
            .collect();
        Ok(ModelState { config, plan, params, bn })
    }

    /// Total learnable scalar count, by enumerating allocated tensors.
    pub fn allocated_param_count(&self) -> u64 {
        self.params.iter().map(|p| p.numel() as u64).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.plan.param_names.iter().position(|n| n == name)
    }

    /// Clone with parameters replaced (e.g. by an EMA shadow).
    pub fn with_params(&self, params: Vec<Tensor<E>>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::Internal("parameter count mismatch".into()));
        }
        for (p, q) in params.iter().zip(&self.params) {
            if p.shape() != q.shape() {
                return Err(Error::Internal("parameter shape mismatch".into()));
            }
        }
        Ok(ModelState { config: self.config.clone(), plan: self.plan.clone(), params, bn: self.bn.clone() })
    }

    pub fn cast<F: Elem>(&self) -> ModelState<F> {
        ModelState {
            config: self.config.clone(),
            plan: self.plan.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            bn: self.bn.clone(),
        }
    }
}

/// Fan-in-scaled uniform init: weights ~ U(−√(6/fan_in), √(6/fan_in)) so
/// Var ≈ 2/fan_in; BN gamma 1, beta 0, biases 0. Only weights draw from the
/// RNG, in plan order.
pub fn init_params<E: Elem>(config: ErannConfig, rng: &mut RngStream) -> Result<ModelState<E>> {
    let mut state = ModelState::new(config)?;
    for (pi, name) in state.plan.param_names.iter().enumerate() {
        let t = &mut state.params[pi];
        if name.ends_with(".gamma") {
            for v in &mut t.data {
                *v = E::ONE;
            }
        } else if name.ends_with(".beta") || name.ends_with(".bias") {
            // already zero
        } else {
            let shape = t.shape();
            let fan_in: usize = if shape.len() == 4 {
                shape[1] * shape[2] * shape[3]
            } else {
                shape[1]
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in &mut t.data {
                *v = E::from_f64(rng.uniform(-bound, bound));
            }
        }
    }
    Ok(state)
}

/// Graph handles produced by one forward build.
pub struct ForwardHandles {
    pub logits: NodeId,
    /// Leaf node per parameter tensor, in state order.
    pub param_nodes: Vec<NodeId>,
    /// (bn buffer index, graph node) per BatchNorm, in execution order.
    pub bn_nodes: Vec<(usize, NodeId)>,
    /// Output node of the extractor BN and of each stage (6 entries).
    pub stage_outputs: Vec<NodeId>,
}

/// Assemble the full network on `g` starting from `input` ([b,1,128,T]).
/// In train mode parameters require gradients and BatchNorm uses batch
/// statistics; running stats are *not* mutated here (the training loop folds
/// them in from `bn_nodes`).
pub fn forward_graph<E: Elem>(
    state: &ModelState<E>,
    g: &mut Graph<E>,
    input: NodeId,
    mode: BnMode,
) -> Result<ForwardHandles> {
    let shape = g.value(input).shape().to_vec();
    if shape.len() != 4 || shape[1] != 1 || shape[2] != MEL_BINS {
        return Err(Error::InvalidShape(format!(
            "expected input [b, 1, {MEL_BINS}, T], got {shape:?}"
        )));
    }
    let t0 = shape[3];
    if t0 == 0 || t0 % 128 != 0 {
        return Err(Error::InvalidShape(format!("input frames {t0} not a multiple of 128")));
    }
    let bsz = shape[0];
    let train = mode == BnMode::Train;

    let param_nodes: Vec<NodeId> =
        state.params.iter().map(|p| g.input(p.clone(), train)).collect();
    let mut bn_nodes = Vec::new();
    let mut stage_outputs = Vec::new();

    let mut bn_apply = |g: &mut Graph<E>, x: NodeId, slot: &BnSlot| -> Result<NodeId> {
        let buf = &state.bn[slot.buf];
        let y = g.batchnorm2d(
            x,
            param_nodes[slot.gamma],
            param_nodes[slot.beta],
            &buf.mean_f64(),
            &buf.var_f64(),
            mode,
            BN_EPS,
        )?;
        bn_nodes.push((slot.buf, y));
        Ok(y)
    };

    // Extractor BatchNorm over mel bins: [b,1,128,T] and [b,128,1,T] share
    // the same linear layout, so the transposes are plain reshapes.
    let x = g.reshape(input, &[bsz, MEL_BINS, 1, t0])?;
    let x = bn_apply(g, x, &state.plan.extractor_bn)?;
    let mut h = g.reshape(x, &[bsz, 1, MEL_BINS, t0])?;
    stage_outputs.push(h);

    for (ai, arb) in state.plan.arbs.iter().enumerate() {
        let shortcut_src = h;
        let mut z = h;
        if let Some(pre) = &arb.pre_bn {
            z = bn_apply(g, z, pre)?;
            z = g.leaky_relu(z, LEAKY_SLOPE);
        }
        z = g.conv2d(z, param_nodes[arb.conv1], arb.stride, (1, 1))?;
        z = bn_apply(g, z, &arb.mid_bn)?;
        z = g.leaky_relu(z, LEAKY_SLOPE);
        z = g.conv2d(z, param_nodes[arb.conv2], (1, 1), arb.p2)?;
        let sc = match arb.proj {
            Some(p) => g.conv2d(shortcut_src, param_nodes[p], arb.stride, (0, 0))?,
            None => shortcut_src,
        };
        h = g.add(z, sc)?;
        if state.plan.stage_ends.contains(&ai) {
            stage_outputs.push(h);
        }
    }

    let pooled = g.global_pool(h)?;
    let f1 = g.linear(pooled, param_nodes[state.plan.fc1_w], param_nodes[state.plan.fc1_b])?;
    let f1 = g.leaky_relu(f1, LEAKY_SLOPE);
    let logits = g.linear(f1, param_nodes[state.plan.fc2_w], param_nodes[state.plan.fc2_b])?;

    Ok(ForwardHandles { logits, param_nodes, bn_nodes, stage_outputs })
}

/// Stack equal-length spectrograms into an input batch tensor.
pub fn batch_from_specs<E: Elem>(specs: &[LogMelSpec]) -> Result<Tensor<E>> {
    if specs.is_empty() {
        return Err(Error::InvalidInput("empty spectrogram batch".into()));
    }
    let t = specs[0].t_s;
    for s in specs {
        if s.n_mels != MEL_BINS {
            return Err(Error::InvalidShape(format!("expected {MEL_BINS} mel bins, got {}", s.n_mels)));
        }
        if s.t_s != t {
            return Err(Error::InvalidShape(format!(
                "ragged batch: {t} frames vs {}",
                s.t_s
            )));
        }
    }
    let mut x = Tensor::zeros(&[specs.len(), 1, MEL_BINS, t]);
    for (b, s) in specs.iter().enumerate() {
        for (i, &v) in s.values.iter().enumerate() {
            x.data[b * MEL_BINS * t + i] = E::from_f64(v as f64);
        }
    }
    Ok(x)
}

pub fn apply_head<E: Elem>(head: Head, logits: &Tensor<E>) -> Tensor<E> {
    match head {
        Head::Sigmoid => sigmoid_probs(logits),
        Head::Softmax => softmax_probs(logits),
    }
}

/// Head-activated predictions for a batch of spectrograms.
pub fn forward<E: Elem>(
    state: &ModelState<E>,
    specs: &[LogMelSpec],
    mode: BnMode,
) -> Result<Tensor<E>> {
    let x = batch_from_specs(specs)?;
    let mut g = Graph::new();
    let input = g.input(x, false);
    let h = forward_graph(state, &mut g, input, mode)?;
    Ok(apply_head(state.config.head, g.value(h.logits)))
}

/// Analytic (freq, time, channels) output size of the extractor and each
/// stage for a t-second input, per Table 1 / Eq. 4.
pub fn stage_output_sizes(config: &ErannConfig, t_seconds: usize) -> Result<Vec<(usize, usize, usize)>> {
    if t_seconds < 1 {
        return Err(Error::InvalidConfig("t_seconds must be >= 1".into()));
    }
    let t0 = 128 * t_seconds;
    let (t1, t2, t3, t4) = temporal_sizes(t0, config.s_m)?;
    let w = config.w;
    Ok(vec![
        (128, t0, 1),
        (128, t0, 8 * w),
        (64, t1, 16 * w),
        (32, t2, 32 * w),
        (16, t3, 64 * w),
        (8, t4, 128 * w),
    ])
}

/// Closed-form learnable-parameter count; kept independent of the plan
/// enumeration so tests can cross-check the two.
pub fn count_params(config: &ErannConfig) -> Result<u64> {
    config.validate()?;
    let w = config.w as u64;
    let n = config.n_classes as u64;
    let mut total = 2 * MEL_BINS as u64; // extractor BN

    let mut in_ch = 1u64;
    for stage in 0..STAGES as u64 {
        let out = 8 * w << stage;
        for i in 0..ARBS_PER_STAGE as u64 {
            let first = i == 0;
            let (x, y): (u64, u64) = if stage == 0 || !first {
                (1, 1)
            } else {
                let (s1, s2, s3) = stride_schedule(config.s_m)?;
                let st = [0, s1, s2, s3, 2][stage as usize] as u64;
                (2, st)
            };
            let k1 = |z: u64| if z == 4 { 6u64 } else { 3 };
            let k2 = |z: u64| if z == 4 { 5u64 } else { 3 };
            let pre_activation = !(stage == 0 && first);
            if pre_activation {
                total += 2 * in_ch; // leading BN
            }
            total += out * in_ch * k1(x) * k1(y); // conv1
            total += 2 * out; // mid BN
            total += out * out * k2(x) * k2(y); // conv2
            if (x, y) != (1, 1) || in_ch != out {
                total += out * in_ch; // 1x1 projection
            }
            in_ch = out;
        }
    }
    let d = 128 * w;
    total += d * d + d; // FC1
    total += n * d + n; // FC2
    Ok(total)
}

/// Per-layer multiply-accumulate counts for a single 128×(128·t) input.
pub fn count_macs_detailed(config: &ErannConfig, t_seconds: usize) -> Result<Vec<(String, u64)>> {
    if t_seconds < 1 {
        return Err(Error::InvalidConfig("t_seconds must be >= 1".into()));
    }
    let plan = ModelPlan::new(config)?;
    let mut out = Vec::new();
    let (mut fh, mut tw) = (MEL_BINS as u64, 128 * t_seconds as u64);
    for arb in &plan.arbs {
        let (sx, sy) = (arb.stride.0 as u64, arb.stride.1 as u64);
        let (inc, onc) = (arb.in_ch as u64, arb.out_ch as u64);
        let (k1x, k1y) = (arb.k1.0 as u64, arb.k1.1 as u64);
        let (k2x, k2y) = (arb.k2.0 as u64, arb.k2.1 as u64);
        let of = (fh + 2 - k1x) / sx + 1;
        let ot = (tw + 2 - k1y) / sy + 1;
        out.push((format!("{}.conv1", arb.name), of * ot * onc * inc * k1x * k1y));
        out.push((format!("{}.conv2", arb.name), of * ot * onc * onc * k2x * k2y));
        if arb.projection {
            let pf = (fh - 1) / sx + 1;
            let pt = (tw - 1) / sy + 1;
            debug_assert_eq!((pf, pt), (of, ot), "projection/conv path shape divergence");
            out.push((format!("{}.proj", arb.name), pf * pt * onc * inc));
        }
        (fh, tw) = (of, ot);
    }
    let d = config.embed_dim() as u64;
    out.push(("fc1".into(), d * d));
    out.push(("fc2".into(), config.n_classes as u64 * d));
    Ok(out)
}

pub fn count_macs(config: &ErannConfig, t_seconds: usize) -> Result<u64> {
    Ok(count_macs_detailed(config, t_seconds)?.iter().map(|(_, m)| m).sum())
}

/// MACs of the fully-connected layers alone (duration-independent).
pub fn fc_macs(config: &ErannConfig) -> u64 {
    let d = config.embed_dim() as u64;
    d * d + config.n_classes as u64 * d
}

/// Load pretrained weights into a model with a (possibly) different class
/// count or head. Everything is copied except FC2, which is reinitialized
/// when the class count changes or `reinit_head` forces it.
pub fn transfer_load<E: Elem>(
    src: &ModelState<E>,
    new_config: &ErannConfig,
    reinit_head: bool,
    rng: &mut RngStream,
) -> Result<ModelState<E>> {
    if src.config.w != new_config.w || src.config.s_m != new_config.s_m {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint is {} but requested {}",
            src.config.name(),
            new_config.name()
        )));
    }
    let mut dst = ModelState::<E>::new(new_config.clone())?;
    let new_head = new_config.n_classes != src.config.n_classes || reinit_head;
    for (pi, name) in dst.plan.param_names.iter().enumerate() {
        let is_fc2 = name == "fc2.weight" || name == "fc2.bias";
        if is_fc2 && new_head {
            if name == "fc2.weight" {
                let d = new_config.embed_dim();
                let bound = (6.0 / d as f64).sqrt();
                for v in &mut dst.params[pi].data {
                    *v = E::from_f64(rng.uniform(-bound, bound));
                }
            }
            // fc2.bias stays zero
            continue;
        }
        let si = src
            .param_index(name)
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing tensor {name}")))?;
        if src.params[si].shape() != dst.params[pi].shape() {
            return Err(Error::IncompatibleCheckpoint(format!("shape mismatch on {name}")));
        }
        dst.params[pi] = src.params[si].clone();
    }
    dst.bn = src.bn.clone();
    Ok(dst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::MelConfig;

    fn cfg(w: usize, s_m: usize, n: usize, head: Head) -> ErannConfig {
        ErannConfig::new(w, s_m, n, head).unwrap()
    }

    #[test]
    fn stride_schedule_values() {
        assert_eq!(stride_schedule(0).unwrap(), (2, 2, 2));
        assert_eq!(stride_schedule(1).unwrap(), (4, 2, 2));
        assert_eq!(stride_schedule(2).unwrap(), (4, 4, 2));
        assert_eq!(stride_schedule(3).unwrap(), (4, 4, 4));
        assert!(stride_schedule(4).is_err());
    }

    #[test]
    fn temporal_size_values() {
        assert_eq!(temporal_sizes(1280, 1).unwrap(), (320, 160, 80, 40));
        assert_eq!(temporal_sizes(1280, 0).unwrap(), (640, 320, 160, 80));
        // maximum stride product is 128 at s_m = 3
        let (_, _, _, t4) = temporal_sizes(1280, 3).unwrap();
        assert_eq!(1280 / t4, 128);
        assert!(temporal_sizes(1000, 0).is_err());
    }

    #[test]
    fn kernel_params_values() {
        assert_eq!(arb_kernel_params(1).unwrap(), (3, 3, 1));
        assert_eq!(arb_kernel_params(2).unwrap(), (3, 3, 1));
        assert_eq!(arb_kernel_params(4).unwrap(), (6, 5, 2));
        assert!(arb_kernel_params(3).is_err());
    }

    #[test]
    fn param_count_anchors() {
        // published complexity-table values, ±0.5%
        let anchors: &[(usize, usize, usize, f64)] = &[
            (4, 2, 527, 24.5e6),
            (5, 2, 527, 38.2e6),
            (6, 0, 527, 54.4e6),
            (6, 1, 527, 54.5e6),
            (6, 2, 527, 54.9e6),
            (6, 3, 527, 56.5e6),
            (5, 2, 50, 37.9e6),
            (3, 1, 50, 13.6e6),
        ];
        for &(w, s_m, n, expect) in anchors {
            let c = cfg(w, s_m, n, Head::Sigmoid);
            let got = count_params(&c).unwrap() as f64;
            let rel = (got - expect).abs() / expect;
            assert!(rel < 0.005, "{}: {got} vs {expect} ({:.3}%)", c.name(), rel * 100.0);
        }
    }

    #[test]
    fn param_count_matches_allocation() {
        for &(w, s_m, n) in &[(1usize, 0usize, 8usize), (2, 3, 50), (4, 2, 527)] {
            let c = cfg(w, s_m, n, Head::Sigmoid);
            let state = ModelState::<f32>::new(c.clone()).unwrap();
            assert_eq!(count_params(&c).unwrap(), state.allocated_param_count(), "{}", c.name());
        }
    }

    #[test]
    fn mac_hand_oracle_and_properties() {
        // first block of ERANN-·-1, t = 1: hand-computed MACs
        let c = cfg(1, 3, 8, Head::Softmax);
        let detail = count_macs_detailed(&c, 1).unwrap();
        let find = |n: &str| detail.iter().find(|(k, _)| k == n).unwrap().1;
        assert_eq!(find("stage0.arb0.conv1"), 128 * 128 * 8 * 9);
        assert_eq!(find("stage0.arb0.conv2"), 128 * 128 * 8 * 8 * 9);
        assert_eq!(find("stage0.arb0.proj"), 128 * 128 * 8);

        // strictly decreasing in s_m at fixed W, t=10
        let mut prev = u64::MAX;
        for s_m in 0..=3 {
            let c = cfg(6, s_m, 527, Head::Sigmoid);
            let m = count_macs(&c, 10).unwrap();
            assert!(m < prev, "s_m={s_m}: {m} !< {prev}");
            prev = m;
        }

        // conv cost linear in t (FC excluded)
        let c = cfg(2, 1, 50, Head::Sigmoid);
        let fc = fc_macs(&c);
        let m1 = count_macs(&c, 3).unwrap() - fc;
        let m2 = count_macs(&c, 6).unwrap() - fc;
        let rel = (m2 as f64 - 2.0 * m1 as f64).abs() / (2.0 * m1 as f64);
        assert!(rel < 0.01, "nonlinear: {m1} -> {m2} ({rel})");
    }

    #[test]
    fn init_statistics() {
        let c = cfg(4, 2, 10, Head::Softmax);
        let mut rng = RngStream::new(42);
        let state = init_params::<f32>(c.clone(), &mut rng).unwrap();
        // gammas 1, betas/biases 0
        for (pi, name) in state.plan.param_names.iter().enumerate() {
            if name.ends_with(".gamma") {
                assert!(state.params[pi].data.iter().all(|&v| v == 1.0));
            } else if name.ends_with(".beta") || name.ends_with(".bias") {
                assert!(state.params[pi].data.iter().all(|&v| v == 0.0));
            }
        }
        // fc1 is 512x512: sample variance ~ 2/512 within 20%
        let fc1 = &state.params[state.plan.fc1_w];
        let mean: f64 = fc1.data.iter().map(|&v| v as f64).sum::<f64>() / fc1.numel() as f64;
        let var: f64 = fc1.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>()
            / fc1.numel() as f64;
        let expect = 2.0 / 512.0;
        assert!((var - expect).abs() / expect < 0.2, "var {var} vs {expect}");

        // same seed -> identical init
        let mut rng2 = RngStream::new(42);
        let state2 = init_params::<f32>(c, &mut rng2).unwrap();
        for (a, b) in state.params.iter().zip(&state2.params) {
            assert_eq!(a.data, b.data);
        }
    }

    fn spec_of_len(t_s: usize, fill: impl Fn(usize) -> f32) -> LogMelSpec {
        let n_mels = MEL_BINS;
        LogMelSpec {
            n_mels,
            t_s,
            t_seconds: t_s / 128,
            values: (0..n_mels * t_s).map(fill).collect(),
        }
    }

    #[test]
    fn forward_shapes_and_heads() {
        let c = cfg(1, 3, 5, Head::Sigmoid);
        let mut rng = RngStream::new(7);
        let state = init_params::<f32>(c, &mut rng).unwrap();

        // all-zero input, sigmoid head: outputs in (0,1), shape b x N
        let specs = vec![spec_of_len(128, |_| 0.0); 2];
        let probs = forward(&state, &specs, BnMode::Eval).unwrap();
        assert_eq!(probs.shape(), &[2, 5]);
        assert!(probs.data.iter().all(|&p| p > 0.0 && p < 1.0));

        // softmax head: rows sum to 1
        let c = cfg(1, 3, 4, Head::Softmax);
        let mut rng = RngStream::new(8);
        let state = init_params::<f32>(c, &mut rng).unwrap();
        let specs = vec![spec_of_len(128, |i| (i % 13) as f32 * 0.1 - 0.5)];
        let probs = forward(&state, &specs, BnMode::Eval).unwrap();
        let s: f32 = probs.data.iter().sum();
        assert!((s - 1.0).abs() < 1e-5);

        // eval-mode forward twice -> identical
        let again = forward(&state, &specs, BnMode::Eval).unwrap();
        assert_eq!(probs.data, again.data);

        // wrong mel count rejected
        let bad = LogMelSpec { n_mels: 64, t_s: 128, t_seconds: 1, values: vec![0.0; 64 * 128] };
        assert!(forward(&state, &[bad], BnMode::Eval).is_err());
    }

    #[test]
    fn stage_shapes_match_prediction() {
        // actual graph shapes vs the analytic table, one cheap config
        let c = cfg(1, 2, 4, Head::Softmax);
        let mut rng = RngStream::new(9);
        let state = init_params::<f32>(c.clone(), &mut rng).unwrap();
        let x = batch_from_specs::<f32>(&[spec_of_len(256, |i| (i % 7) as f32)]).unwrap();
        let mut g = Graph::new();
        let input = g.input(x, false);
        let h = forward_graph(&state, &mut g, input, BnMode::Eval).unwrap();
        let predicted = stage_output_sizes(&c, 2).unwrap();
        assert_eq!(h.stage_outputs.len(), predicted.len());
        for (node, &(f, t, ch)) in h.stage_outputs.iter().zip(&predicted) {
            let shape = g.value(*node).shape();
            assert_eq!(shape, &[1, ch, f, t], "predicted ({f},{t},{ch})");
        }
        // logits shape
        assert_eq!(g.value(h.logits).shape(), &[1, 4]);
    }

    #[test]
    fn duration_independence() {
        // same model accepts 1s and 3s inputs (different T), same output dim
        let c = cfg(1, 3, 3, Head::Sigmoid);
        let mut rng = RngStream::new(10);
        let state = init_params::<f32>(c, &mut rng).unwrap();
        for t in [1usize, 3] {
            let probs = forward(&state, &[spec_of_len(128 * t, |i| (i % 5) as f32)], BnMode::Eval)
                .unwrap();
            assert_eq!(probs.shape(), &[1, 3]);
        }
    }

    #[test]
    fn transfer_rules() {
        let base = cfg(1, 2, 6, Head::Sigmoid);
        let mut rng = RngStream::new(11);
        let src = init_params::<f32>(base.clone(), &mut rng).unwrap();

        // same N, not forced: byte-equal
        let same = transfer_load(&src, &base, false, &mut rng).unwrap();
        for (a, b) in src.params.iter().zip(&same.params) {
            assert_eq!(a.data, b.data);
        }

        // new N: only fc2 shapes change, everything else copied
        let newc = cfg(1, 2, 3, Head::Softmax);
        let moved = transfer_load(&src, &newc, false, &mut rng).unwrap();
        for (pi, name) in moved.plan.param_names.iter().enumerate() {
            let si = src.param_index(name).unwrap();
            if name.starts_with("fc2.") {
                assert_ne!(src.params[si].shape(), moved.params[pi].shape());
            } else {
                assert_eq!(src.params[si].data, moved.params[pi].data, "{name}");
            }
        }

        // W mismatch rejected
        let wrong = cfg(2, 2, 6, Head::Sigmoid);
        assert!(matches!(
            transfer_load(&src, &wrong, false, &mut rng),
            Err(Error::IncompatibleCheckpoint(_))
        ));
    }

    #[test]
    fn feature_frames_are_valid_model_input() {
        // the dsp frame law produces T divisible by 128 -> accepted here
        let mel = MelConfig::default();
        for secs in [1usize, 2] {
            let clip = crate::audio::sine_clip(440.0, secs as f64, 44100, 0.4);
            let spec = crate::dsp::log_mel(&clip, &mel).unwrap();
            assert_eq!(spec.t_s % 128, 0);
            assert_eq!(spec.t_s, 128 * secs);
            let x = batch_from_specs::<f32>(&[spec]).unwrap();
            assert_eq!(x.shape()[3] % 128, 0);
        }
    }
}
