//! Training loop: learning-rate schedules, clip samplers, Adam + EMA,
//! periodic EMA evaluation with best-snapshot retention, and fine-tuning.

use crate::audio::AudioClip;
use crate::augment::{
    mix_labels, mixup, mixup_spec, pitch_shift, spec_augment, temporal_crop, AugmentConfig,
    MixupVariant, RngStream,
};
use crate::data::Dataset;
use crate::dsp::{log_mel, LogMelSpec, MelConfig};
use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph};
use crate::metrics::{accuracy, mean_average_precision};
use crate::model::{
    batch_from_specs, forward, forward_graph, transfer_load, BnBuffers, ErannConfig, Head,
    ModelState, BN_MOMENTUM,
};
use crate::optim::{adam_step, AdamState, EmaState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::tensor::Tensor;
use std::collections::{BTreeMap, HashMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrPolicy {
    /// Linear ramp from max/25 to max over the first 30% of iterations,
    /// then linear decay to max/1e4 at the final iteration.
    OneCycle { max: f64 },
    Constant(f64),
}

pub fn lr_at(policy: &LrPolicy, iteration: usize, total: usize) -> f64 {
    match *policy {
        LrPolicy::Constant(lr) => lr,
        LrPolicy::OneCycle { max } => {
            let warm = (0.3 * total as f64).round() as usize;
            let last = total.saturating_sub(1);
            let i = iteration.min(last);
            if i <= warm {
                let start = max / 25.0;
                if warm == 0 {
                    max
                } else {
                    start + (max - start) * i as f64 / warm as f64
                }
            } else {
                let end = max / 1e4;
                if last == warm {
                    max
                } else {
                    max + (end - max) * (i - warm) as f64 / (last - warm) as f64
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Multi-label: sigmoid head, binary cross-entropy, mAP validation.
    Tagging,
    /// Single-label: softmax head, cross-entropy, accuracy validation.
    Classification,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Tagging => "tagging",
            Task::Classification => "classification",
        }
    }

    pub fn metric_name(&self) -> &'static str {
        match self {
            Task::Tagging => "mAP",
            Task::Classification => "accuracy",
        }
    }

    pub fn head(&self) -> Head {
        match self {
            Task::Tagging => Head::Sigmoid,
            Task::Classification => Head::Softmax,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tagging" => Ok(Task::Tagging),
            "classification" => Ok(Task::Classification),
            other => Err(Error::InvalidConfig(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_iterations: usize,
    pub lr_policy: LrPolicy,
    /// Evaluate the EMA shadow every this many iterations (and at the end).
    pub eval_interval: usize,
    pub ema_decay: f64,
    /// Class-balanced sampling (class uniform, then clip uniform) instead of
    /// clip-uniform.
    pub balanced_sampling: bool,
    pub augment: AugmentConfig,
    pub features: MelConfig,
    pub task: Task,
    pub seed: u64,
    /// Stop early once both the EMA and the live model reach this metric on
    /// the evaluation split.
    pub stop_at_metric: Option<f64>,
}

impl TrainConfig {
    pub fn new(total_iterations: usize, lr_policy: LrPolicy, augment: AugmentConfig, task: Task, seed: u64) -> Self {
        TrainConfig {
            batch_size: 32,
            total_iterations,
            lr_policy,
            eval_interval: 5000,
            ema_decay: 0.999,
            balanced_sampling: false,
            augment,
            features: MelConfig::default(),
            task,
            seed,
            stop_at_metric: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::InvalidConfig("eval_interval must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidConfig("ema_decay must lie in [0, 1)".into()));
        }
        let t_c = self.augment.t_c;
        if !(t_c >= 1.0 && t_c.fract() == 0.0) {
            return Err(Error::InvalidConfig(
                "crop length t_c must be a whole number of seconds".into(),
            ));
        }
        self.augment.validate()
    }
}

/// Clip sampler over the training split.
struct Sampler {
    balanced: bool,
    pool: Vec<usize>,
    /// Class -> clips carrying it (balanced mode; positive-free classes are
    /// left out of the class draw).
    per_class: Vec<Vec<usize>>,
}

impl Sampler {
    fn new(dataset: &Dataset, train_idx: &[usize], balanced: bool) -> Result<Self> {
        if train_idx.is_empty() {
            return Err(Error::InvalidInput("empty training split".into()));
        }
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes()];
        for &i in train_idx {
            for &l in &dataset.clips[i].labels {
                per_class[l].push(i);
            }
        }
        per_class.retain(|v| !v.is_empty());
        if balanced && per_class.is_empty() {
            return Err(Error::InvalidInput("no labeled clips to balance over".into()));
        }
        Ok(Sampler { balanced, pool: train_idx.to_vec(), per_class })
    }

    fn draw(&self, rng: &mut RngStream) -> usize {
        if self.balanced {
            let c = &self.per_class[rng.upto(self.per_class.len() - 1)];
            c[rng.upto(c.len() - 1)]
        } else {
            self.pool[rng.upto(self.pool.len() - 1)]
        }
    }
}

/// One evaluation event, serialized as `key=value` pairs for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// EMA model's metric on the evaluation split.
    pub metric: f64,
    /// Live model's metric on the evaluation split.
    pub live_metric: f64,
}

impl TraceRecord {
    pub fn to_line(&self) -> String {
        format!(
            "iteration={} lr={:.8} train_loss={:.6} metric={:.6} live_metric={:.6}",
            self.iteration, self.lr, self.train_loss, self.metric, self.live_metric
        )
    }
}

/// EMA parameters at the best evaluation so far (earliest wins ties).
#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub iteration: usize,
    pub metric: f64,
    pub params: Vec<Tensor<f32>>,
    pub bn: Vec<BnBuffers>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: ModelState<f32>,
    pub ema: Vec<Tensor<f32>>,
    pub best: Option<BestSnapshot>,
    pub trace: Vec<TraceRecord>,
    /// Batch loss at every iteration, for smoothed-curve checks.
    pub losses: Vec<f64>,
    pub iterations_run: usize,
}

fn load_cached<'a>(
    dataset: &Dataset,
    cache: &'a mut HashMap<usize, AudioClip>,
    idx: usize,
) -> Result<&'a AudioClip> {
    if !cache.contains_key(&idx) {
        cache.insert(idx, dataset.load_audio(idx)?);
    }
    Ok(&cache[&idx])
}

fn draw_r(rng: &mut RngStream, alpha: f64) -> f64 {
    rng.beta(alpha).clamp(1e-6, 1.0 - 1e-6)
}

fn crop_and_pitch(clip: &AudioClip, aug: &AugmentConfig, rng: &mut RngStream) -> Result<AudioClip> {
    let c = temporal_crop(clip, aug.t_c, rng)?;
    if aug.pitch_shift_on {
        pitch_shift(&c, rng, aug)
    } else {
        Ok(c)
    }
}

/// Features + soft target for one batch slot, applying crop, pitch shift,
/// mixup, and SpecAugment in that order.
#[allow(clippy::too_many_arguments)]
fn slot_features(
    dataset: &Dataset,
    audio_cache: &mut HashMap<usize, AudioClip>,
    spec_cache: &mut HashMap<usize, LogMelSpec>,
    idx_a: usize,
    idx_b: Option<usize>,
    aug: &AugmentConfig,
    mel: &MelConfig,
    fast_path: bool,
    crop_len: usize,
    rng: &mut RngStream,
) -> Result<(LogMelSpec, Vec<f32>)> {
    if fast_path {
        let len = load_cached(dataset, audio_cache, idx_a)?.len();
        if len == crop_len {
            // Crop of an exact-length clip is the identity, so the features
            // are fixed and cacheable.
            if !spec_cache.contains_key(&idx_a) {
                let spec = log_mel(&audio_cache[&idx_a], mel)?;
                spec_cache.insert(idx_a, spec);
            }
            return Ok((spec_cache[&idx_a].clone(), dataset.target_vec(idx_a)));
        }
    }
    let a = load_cached(dataset, audio_cache, idx_a)?.clone();
    let a = crop_and_pitch(&a, aug, rng)?;
    let take_labels = |c: &AudioClip| -> Vec<f32> {
        c.labels.clone().expect("labels attached by load_audio")
    };
    match aug.mixup_variant {
        MixupVariant::None => {
            let mut spec = log_mel(&a, mel)?;
            if aug.specaugment_on {
                spec = spec_augment(&spec, aug, rng);
            }
            Ok((spec, take_labels(&a)))
        }
        MixupVariant::StandardWaveform | MixupVariant::ModifiedWaveform => {
            let b = load_cached(dataset, audio_cache, idx_b.expect("mixup partner"))?.clone();
            let b = crop_and_pitch(&b, aug, rng)?;
            let r = draw_r(rng, aug.mixup_alpha);
            let mixed = mixup(&a, &b, r, aug.mixup_variant)?;
            let mut spec = log_mel(&mixed, mel)?;
            if aug.specaugment_on {
                spec = spec_augment(&spec, aug, rng);
            }
            Ok((spec, take_labels(&mixed)))
        }
        MixupVariant::ModifiedSpectrogram => {
            let b = load_cached(dataset, audio_cache, idx_b.expect("mixup partner"))?.clone();
            let b = crop_and_pitch(&b, aug, rng)?;
            let mut spec_a = log_mel(&a, mel)?;
            let mut spec_b = log_mel(&b, mel)?;
            if aug.specaugment_on {
                spec_a = spec_augment(&spec_a, aug, rng);
                spec_b = spec_augment(&spec_b, aug, rng);
            }
            let r = draw_r(rng, aug.mixup_alpha);
            let mixed = mixup_spec(&spec_a, &spec_b, r)?;
            let labels = mix_labels(a.labels.as_deref(), b.labels.as_deref(), r)
                .expect("labels attached by load_audio");
            Ok((mixed, labels))
        }
    }
}

/// Metric of `state` on an evaluation split: full-clip features (no
/// augmentation), eval-mode BatchNorm, batched by equal frame count.
fn evaluate_model(
    state: &ModelState<f32>,
    dataset: &Dataset,
    eval_idx: &[usize],
    task: Task,
    audio_cache: &mut HashMap<usize, AudioClip>,
    spec_cache: &mut HashMap<usize, LogMelSpec>,
    mel: &MelConfig,
) -> Result<f64> {
    if eval_idx.is_empty() {
        return Err(Error::InvalidInput("empty evaluation split".into()));
    }
    for &i in eval_idx {
        if !spec_cache.contains_key(&i) {
            let clip = load_cached(dataset, audio_cache, i)?;
            let spec = log_mel(clip, mel)?;
            spec_cache.insert(i, spec);
        }
    }
    let n = state.config.n_classes;
    let mut scores = Tensor::<f32>::zeros(&[eval_idx.len(), n]);
    // Group rows by frame count so equal-length clips share a forward pass.
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, &i) in eval_idx.iter().enumerate() {
        by_len.entry(spec_cache[&i].t_s).or_default().push(row);
    }
    const EVAL_BATCH: usize = 8;
    for rows in by_len.values() {
        for chunk in rows.chunks(EVAL_BATCH) {
            let specs: Vec<LogMelSpec> =
                chunk.iter().map(|&row| spec_cache[&eval_idx[row]].clone()).collect();
            let probs = forward(state, &specs, BnMode::Eval)?;
            for (k, &row) in chunk.iter().enumerate() {
                scores.data[row * n..(row + 1) * n]
                    .copy_from_slice(&probs.data[k * n..(k + 1) * n]);
            }
        }
    }
    match task {
        Task::Tagging => {
            let mut targets = Tensor::<f32>::zeros(&[eval_idx.len(), n]);
            for (row, &i) in eval_idx.iter().enumerate() {
                targets.data[row * n..(row + 1) * n].copy_from_slice(&dataset.target_vec(i));
            }
            Ok(mean_average_precision(&scores, &targets)?.map)
        }
        Task::Classification => {
            let mut classes = Vec::with_capacity(eval_idx.len());
            for &i in eval_idx {
                let labels = &dataset.clips[i].labels;
                if labels.len() != 1 {
                    return Err(Error::InvalidInput(format!(
                        "classification needs exactly one label per clip, clip {i} has {}",
                        labels.len()
                    )));
                }
                classes.push(labels[0]);
            }
            accuracy(&scores, &classes)
        }
    }
}

/// Run the optimization loop. `state` should be initialized (fresh or
/// transferred); evaluation is skipped entirely when `eval_idx` is empty.
pub fn train(
    mut state: ModelState<f32>,
    dataset: &Dataset,
    train_idx: &[usize],
    eval_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.n_classes() != state.config.n_classes {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} classes but the model head has {}",
            dataset.n_classes(),
            state.config.n_classes
        )));
    }
    if cfg.task.head() != state.config.head {
        return Err(Error::InvalidConfig(format!(
            "task '{}' needs a {:?} head, model has {:?}",
            cfg.task.name(),
            cfg.task.head(),
            state.config.head
        )));
    }
    let mel = cfg.features.clone();
    let crop_len = (cfg.augment.t_c * crate::audio::CANONICAL_SR as f64).round() as usize;
    let fast_path = cfg.augment.mixup_variant == MixupVariant::None
        && !cfg.augment.specaugment_on
        && !cfg.augment.pitch_shift_on;
    let with_mixup = cfg.augment.mixup_variant != MixupVariant::None;

    let mut sample_rng = RngStream::substream(cfg.seed, 0x5A);
    let mut aug_rng = RngStream::substream(cfg.seed, 0xA6);
    let sampler = Sampler::new(dataset, train_idx, cfg.balanced_sampling)?;

    let mut adam = AdamState::new(&state.params);
    let mut ema = EmaState::new(&state.params, cfg.ema_decay);
    let mut audio_cache: HashMap<usize, AudioClip> = HashMap::new();
    let mut train_spec_cache: HashMap<usize, LogMelSpec> = HashMap::new();
    let mut eval_spec_cache: HashMap<usize, LogMelSpec> = HashMap::new();

    let n = state.config.n_classes;
    let mut trace = Vec::new();
    let mut losses = Vec::with_capacity(cfg.total_iterations);
    let mut best: Option<BestSnapshot> = None;
    let mut iterations_run = 0;

    for it in 0..cfg.total_iterations {
        let lr = lr_at(&cfg.lr_policy, it, cfg.total_iterations);

        let mut specs = Vec::with_capacity(cfg.batch_size);
        let mut targets = Tensor::<f32>::zeros(&[cfg.batch_size, n]);
        for slot in 0..cfg.batch_size {
            let idx_a = sampler.draw(&mut sample_rng);
            let idx_b = if with_mixup { Some(sampler.draw(&mut sample_rng)) } else { None };
            let (spec, target) = slot_features(
                dataset,
                &mut audio_cache,
                &mut train_spec_cache,
                idx_a,
                idx_b,
                &cfg.augment,
                &mel,
                fast_path,
                crop_len,
                &mut aug_rng,
            )?;
            targets.data[slot * n..(slot + 1) * n].copy_from_slice(&target);
            specs.push(spec);
        }

        let x = batch_from_specs::<f32>(&specs)?;
        let mut g = Graph::new();
        let input = g.input(x, false);
        let h = forward_graph(&state, &mut g, input, BnMode::Train)?;
        let loss = match cfg.task {
            Task::Tagging => g.sigmoid_bce_loss(h.logits, targets)?,
            Task::Classification => g.softmax_ce_loss(h.logits, targets)?,
        };
        let loss_val = g.value(loss).data[0] as f64;
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!(
                "loss became non-finite ({loss_val}) at iteration {it}"
            )));
        }
        g.backward(loss)?;

        let grads: Vec<Tensor<f32>> = h
            .param_nodes
            .iter()
            .zip(&state.params)
            .map(|(&node, p)| g.grad(node).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();

        // Fold batch statistics into the running estimates (momentum 0.1,
        // variance unbiased by m/(m-1)).
        for &(bi, node) in &h.bn_nodes {
            if let Some((mean, var, m)) = g.bn_batch_stats(node) {
                let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
                let buf = &mut state.bn[bi];
                for c in 0..mean.len() {
                    let rm = (1.0 - BN_MOMENTUM) * buf.running_mean[c] as f64 + BN_MOMENTUM * mean[c];
                    let rv = (1.0 - BN_MOMENTUM) * buf.running_var[c] as f64
                        + BN_MOMENTUM * var[c] * unbias;
                    buf.running_mean[c] = rm as f32;
                    buf.running_var[c] = rv as f32;
                }
            }
        }

        adam_step(&mut state.params, &grads, &mut adam, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)?;
        ema.update(&state.params)?;
        losses.push(loss_val);
        iterations_run = it + 1;

        let due = (it + 1) % cfg.eval_interval == 0 || it + 1 == cfg.total_iterations;
        if due && !eval_idx.is_empty() {
            let ema_state = state.with_params(ema.shadow.clone())?;
            let metric = evaluate_model(
                &ema_state, dataset, eval_idx, cfg.task, &mut audio_cache, &mut eval_spec_cache, &mel,
            )?;
            let live_metric = evaluate_model(
                &state, dataset, eval_idx, cfg.task, &mut audio_cache, &mut eval_spec_cache, &mel,
            )?;
            trace.push(TraceRecord { iteration: it + 1, lr, train_loss: loss_val, metric, live_metric });
            if best.as_ref().map_or(true, |b| metric > b.metric) {
                best = Some(BestSnapshot {
                    iteration: it + 1,
                    metric,
                    params: ema.shadow.clone(),
                    bn: state.bn.clone(),
                });
            }
            if let Some(th) = cfg.stop_at_metric {
                if metric >= th && live_metric >= th {
                    break;
                }
            }
        }
    }

    Ok(TrainOutcome { state, ema: ema.shadow, best, trace, losses, iterations_run })
}

/// Metric of a model on an evaluation split (full clips, eval-mode
/// BatchNorm): mAP for tagging, accuracy for classification.
pub fn evaluate(
    state: &ModelState<f32>,
    dataset: &Dataset,
    eval_idx: &[usize],
    task: Task,
    mel: &MelConfig,
) -> Result<f64> {
    let mut audio_cache = HashMap::new();
    let mut spec_cache = HashMap::new();
    evaluate_model(state, dataset, eval_idx, task, &mut audio_cache, &mut spec_cache, mel)
}

/// Transfer the body of `src` onto a (possibly new) head, then train.
pub fn fine_tune(
    src: &ModelState<f32>,
    new_config: &ErannConfig,
    reinit_head: bool,
    dataset: &Dataset,
    train_idx: &[usize],
    eval_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut rng = RngStream::substream(cfg.seed, 0xF1);
    let state = transfer_load(src, new_config, reinit_head, &mut rng)?;
    train(state, dataset, train_idx, eval_idx, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{sine_clip, CANONICAL_SR};
    use crate::data::{ClipSource, DatasetClip};
    use crate::model::init_params;

    #[test]
    fn one_cycle_anchors() {
        let p = LrPolicy::OneCycle { max: 0.001 };
        let total = 1000;
        assert!((lr_at(&p, 0, total) - 0.001 / 25.0).abs() < 1e-15);
        assert!((lr_at(&p, 300, total) - 0.001).abs() < 1e-15);
        assert!((lr_at(&p, 999, total) - 1e-7).abs() < 1e-18);
        for i in 1..300 {
            assert!(lr_at(&p, i, total) > lr_at(&p, i - 1, total));
        }
        for i in 301..1000 {
            assert!(lr_at(&p, i, total) < lr_at(&p, i - 1, total));
        }
        for i in 0..1000 {
            assert!(lr_at(&p, i, total) > 0.0);
        }
        // degenerate totals stay finite and positive
        assert!(lr_at(&p, 0, 1) > 0.0);
        assert!(lr_at(&p, 1, 2) > 0.0);
        let c = LrPolicy::Constant(2e-4);
        assert_eq!(lr_at(&c, 0, 100), 2e-4);
        assert_eq!(lr_at(&c, 99, 100), 2e-4);
    }

    fn tiny_clip(freq: f64, label: usize) -> DatasetClip {
        let clip = sine_clip(freq, 1.0, CANONICAL_SR, 0.5);
        DatasetClip { source: ClipSource::Memory(clip), labels: vec![label], fold: None, group: None }
    }

    /// Dataset with `counts[c]` one-second clips of class c.
    fn synthetic_dataset(counts: &[usize]) -> Dataset {
        let classes = (0..counts.len()).map(|c| format!("c{c}")).collect();
        let mut clips = Vec::new();
        for (c, &k) in counts.iter().enumerate() {
            for j in 0..k {
                clips.push(tiny_clip(200.0 + 100.0 * c as f64 + j as f64, c));
            }
        }
        Dataset { classes, clips }
    }

    #[test]
    fn balanced_sampler_equalizes_rare_class() {
        let ds = synthetic_dataset(&[1, 1000]);
        let idx: Vec<usize> = (0..ds.clips.len()).collect();
        let mut rng = RngStream::new(7);
        let s = Sampler::new(&ds, &idx, true).unwrap();
        let mut rare = 0;
        let draws = 10_000;
        for _ in 0..draws {
            if s.draw(&mut rng) == 0 {
                rare += 1;
            }
        }
        let frac = rare as f64 / draws as f64;
        assert!((frac - 0.5).abs() < 0.05, "rare-class fraction {frac}");

        // uniform sampling leaves the rare class rare
        let mut rng = RngStream::new(7);
        let u = Sampler::new(&ds, &idx, false).unwrap();
        let rare = (0..draws).filter(|_| u.draw(&mut rng) == 0).count();
        assert!((rare as f64 / draws as f64) < 0.01);
    }

    #[test]
    fn balanced_sampler_single_class() {
        let ds = synthetic_dataset(&[3]);
        let idx = vec![0, 1, 2];
        let mut rng = RngStream::new(1);
        let s = Sampler::new(&ds, &idx, true).unwrap();
        for _ in 0..50 {
            assert!(s.draw(&mut rng) < 3);
        }
        assert!(Sampler::new(&ds, &[], true).is_err());
    }

    fn probe_config(iters: usize, lr: f64, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(
            iters,
            LrPolicy::Constant(lr),
            AugmentConfig::off(1.0),
            Task::Classification,
            seed,
        );
        cfg.batch_size = 2;
        cfg.eval_interval = iters; // evaluate once, at the end
        cfg.ema_decay = 0.9;
        cfg
    }

    fn probe_model(n_classes: usize, seed: u64) -> ModelState<f32> {
        let config = ErannConfig::new(1, 3, n_classes, Head::Softmax).unwrap();
        let mut rng = RngStream::substream(seed, 0x11);
        init_params(config, &mut rng).unwrap()
    }

    #[test]
    fn training_is_deterministic() {
        let ds = synthetic_dataset(&[1, 1]);
        let run = || {
            let state = probe_model(2, 3);
            train(state, &ds, &[0, 1], &[0, 1], &probe_config(2, 1e-3, 3)).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.iterations_run, b.iterations_run);
        assert_eq!(a.trace, b.trace);
        for (p, q) in a.state.params.iter().zip(&b.state.params) {
            let pb: Vec<u32> = p.data.iter().map(|v| v.to_bits()).collect();
            let qb: Vec<u32> = q.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(pb, qb);
        }
        for (p, q) in a.ema.iter().zip(&b.ema) {
            assert_eq!(p.data, q.data);
        }
        for (p, q) in a.state.bn.iter().zip(&b.state.bn) {
            assert_eq!(p.running_mean, q.running_mean);
            assert_eq!(p.running_var, q.running_var);
        }
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let ds = synthetic_dataset(&[1, 1]);
        let state = probe_model(2, 5);
        let before: Vec<Vec<u32>> =
            state.params.iter().map(|p| p.data.iter().map(|v| v.to_bits()).collect()).collect();
        let out = train(state, &ds, &[0, 1], &[], &probe_config(1, 0.0, 5)).unwrap();
        let after: Vec<Vec<u32>> =
            out.state.params.iter().map(|p| p.data.iter().map(|v| v.to_bits()).collect()).collect();
        assert_eq!(before, after);
        assert!(out.trace.is_empty()); // no eval split
        // EMA shadow equals the (unchanged) parameters
        for (s, p) in out.ema.iter().zip(&out.state.params) {
            assert_eq!(s.data, p.data);
        }
        // running stats did move: BatchNorm folds batch statistics regardless
        let moved = out.state.bn.iter().any(|b| b.running_mean.iter().any(|&v| v != 0.0));
        assert!(moved);
    }

    #[test]
    fn non_finite_loss_reports_iteration() {
        let ds = synthetic_dataset(&[1, 1]);
        let mut state = probe_model(2, 9);
        let fc2 = state.param_index("fc2.weight").unwrap();
        state.params[fc2].data[0] = f32::NAN;
        let err = train(state, &ds, &[0, 1], &[], &probe_config(1, 1e-3, 9)).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("iteration 0"), "{msg}"),
            other => panic!("expected Numeric error, got {other:?}"),
        }
    }

    #[test]
    fn loss_decreases_on_separable_pair() {
        let ds = synthetic_dataset(&[1, 1]);
        let state = probe_model(2, 21);
        let mut cfg = probe_config(12, 2e-3, 21);
        cfg.eval_interval = 4; // records at 4, 8, 12
        let out = train(state, &ds, &[0, 1], &[0, 1], &cfg).unwrap();
        assert_eq!(out.trace.len(), 3);
        let first = out.trace.first().unwrap().train_loss;
        let last = out.trace.last().unwrap().train_loss;
        assert!(last < first, "loss went {first} -> {last}");
        // best snapshot is the metric argmax, earliest on ties
        let best = out.best.as_ref().unwrap();
        let top = out.trace.iter().map(|r| r.metric).fold(f64::MIN, f64::max);
        assert_eq!(best.metric, top);
        let earliest = out.trace.iter().find(|r| r.metric == top).unwrap().iteration;
        assert_eq!(best.iteration, earliest);
        // EMA shadow lags the live parameters
        let differs = out
            .ema
            .iter()
            .zip(&out.state.params)
            .any(|(s, p)| s.data.iter().zip(&p.data).any(|(a, b)| a != b));
        assert!(differs);
    }

    #[test]
    fn fine_tune_starts_from_transferred_weights() {
        let ds = synthetic_dataset(&[1, 1]);
        let scratch = probe_model(2, 33);
        let mut cfg = probe_config(40, 2e-3, 33);
        cfg.eval_interval = 5;
        cfg.stop_at_metric = Some(1.0);
        let pretrained = train(scratch, &ds, &[0, 1], &[0, 1], &cfg).unwrap();
        let scratch_first = pretrained.trace[0].train_loss;
        let end = pretrained.trace.last().unwrap();
        assert_eq!((end.metric, end.live_metric), (1.0, 1.0), "pretraining did not converge");

        // same task, same head: the transferred model should start where the
        // pretrained one left off, far below a fresh model's first loss
        let cfg2 = probe_config(1, 2e-3, 34);
        let new_config = pretrained.state.config.clone();
        let ft = fine_tune(&pretrained.state, &new_config, false, &ds, &[0, 1], &[0, 1], &cfg2).unwrap();
        assert!(
            ft.trace[0].train_loss < scratch_first,
            "fine-tune first loss {} vs scratch {}",
            ft.trace[0].train_loss,
            scratch_first
        );

        // head swap: new class count forces an fc2 reinit and a new plan
        let wider = ErannConfig::new(1, 3, 3, Head::Softmax).unwrap();
        let mut rng = RngStream::new(1);
        let moved = transfer_load(&pretrained.state, &wider, false, &mut rng).unwrap();
        let fc2 = moved.param_index("fc2.weight").unwrap();
        assert_eq!(moved.params[fc2].shape(), &[3, 128]);

        // zero fine-tuning iterations: the result IS the transferred model
        let mut cfg0 = probe_config(0, 1e-3, 34);
        cfg0.eval_interval = 1;
        let zero = fine_tune(&pretrained.state, &new_config, false, &ds, &[0, 1], &[0, 1], &cfg0).unwrap();
        assert_eq!(zero.iterations_run, 0);
        assert!(zero.trace.is_empty());
        for (p, q) in zero.state.params.iter().zip(&pretrained.state.params) {
            assert_eq!(
                p.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                q.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        for (b, c) in zero.state.bn.iter().zip(&pretrained.state.bn) {
            assert_eq!(b.running_mean, c.running_mean);
            assert_eq!(b.running_var, c.running_var);
        }

        // lr-0 fine-tuning on the pre-training task: parameters frozen, so
        // the validation metric stays put
        let m0 =
            evaluate(&pretrained.state, &ds, &[0, 1], Task::Classification, &MelConfig::default())
                .unwrap();
        let frozen =
            fine_tune(&pretrained.state, &new_config, false, &ds, &[0, 1], &[0, 1], &probe_config(2, 0.0, 35))
                .unwrap();
        for (p, q) in frozen.state.params.iter().zip(&pretrained.state.params) {
            assert_eq!(p.data, q.data);
        }
        let m1 = evaluate(&frozen.state, &ds, &[0, 1], Task::Classification, &MelConfig::default())
            .unwrap();
        assert_eq!(m0, m1);
    }

    #[test]
    fn config_validation() {
        let mut cfg = probe_config(1, 1e-3, 0);
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = probe_config(1, 1e-3, 0);
        cfg.augment.t_c = 0.5;
        assert!(cfg.validate().is_err());
        let mut cfg = probe_config(1, 1e-3, 0);
        cfg.ema_decay = 1.0;
        assert!(cfg.validate().is_err());
        // task/head mismatch caught at train time
        let ds = synthetic_dataset(&[1, 1]);
        let state = probe_model(2, 1);
        let mut cfg = probe_config(1, 1e-3, 1);
        cfg.task = Task::Tagging;
        assert!(train(state, &ds, &[0, 1], &[], &cfg).is_err());
    }
}
