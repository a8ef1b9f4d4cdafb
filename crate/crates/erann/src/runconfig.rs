//! Flat key=value run configuration with section prefixes (model.W=6).
//! One assignment per line; '#' starts a comment; flags override file keys.

use crate::augment::AugmentConfig;
use crate::dsp::MelConfig;
use crate::error::{Error, Result};
use crate::model::{ErannConfig, Head};
use crate::train::{LrPolicy, Task, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ErannConfig,
    pub task: Task,
    pub batch_size: usize,
    pub total_iterations: usize,
    pub lr_policy_kind: LrPolicyKind,
    pub lr: f64,
    pub eval_interval: usize,
    pub ema_decay: f64,
    pub balanced_sampling: bool,
    pub stop_at_metric: Option<f64>,
    pub features: MelConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrPolicyKind {
    OneCycle,
    Constant,
}

impl LrPolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            LrPolicyKind::OneCycle => "one-cycle",
            LrPolicyKind::Constant => "constant",
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ErannConfig { w: 4, s_m: 2, n_classes: 527, head: Head::Sigmoid },
            task: Task::Tagging,
            batch_size: 32,
            total_iterations: 10_000,
            lr_policy_kind: LrPolicyKind::OneCycle,
            lr: 0.001,
            eval_interval: 5000,
            ema_decay: 0.999,
            balanced_sampling: false,
            stop_at_metric: None,
            features: MelConfig::default(),
            augment: AugmentConfig::for_crop_seconds(5.0),
            seed: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("key '{key}': cannot parse value '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("key '{key}': expected true or false, got '{v}'"))),
    }
}

impl RunConfig {
    /// Apply one `key=value` assignment (used for file lines and overrides).
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model.W" => self.model.w = parse_num(key, v)?,
            "model.s_m" => self.model.s_m = parse_num(key, v)?,
            "model.N" => self.model.n_classes = parse_num(key, v)?,
            "model.head" => self.model.head = v.parse()?,
            "train.task" => self.task = v.parse()?,
            "train.batch_size" => self.batch_size = parse_num(key, v)?,
            "train.total_iterations" => self.total_iterations = parse_num(key, v)?,
            "train.lr_policy" => {
                self.lr_policy_kind = match v {
                    "one-cycle" => LrPolicyKind::OneCycle,
                    "constant" => LrPolicyKind::Constant,
                    _ => {
                        return Err(Error::Config(format!(
                            "key '{key}': expected one-cycle or constant, got '{v}'"
                        )))
                    }
                }
            }
            "train.lr" => self.lr = parse_num(key, v)?,
            "train.eval_interval" => self.eval_interval = parse_num(key, v)?,
            "train.ema_decay" => self.ema_decay = parse_num(key, v)?,
            "train.balanced_sampling" => self.balanced_sampling = parse_bool(key, v)?,
            "train.stop_at_metric" => {
                self.stop_at_metric = if v == "none" { None } else { Some(parse_num(key, v)?) }
            }
            "features.window_len" => self.features.window_len = parse_num(key, v)?,
            "features.hop" => self.features.hop = parse_num(key, v)?,
            "features.n_mels" => self.features.n_mels = parse_num(key, v)?,
            "features.f_min" => self.features.f_min = parse_num(key, v)?,
            "features.f_max" => self.features.f_max = parse_num(key, v)?,
            "features.log_floor" => self.features.log_floor = parse_num(key, v)?,
            "augment.t_c" => self.augment.t_c = parse_num(key, v)?,
            "augment.mixup_alpha" => self.augment.mixup_alpha = parse_num(key, v)?,
            "augment.mixup_variant" => self.augment.mixup_variant = v.parse()?,
            "augment.specaugment_on" => self.augment.specaugment_on = parse_bool(key, v)?,
            "augment.n_time_masks" => self.augment.n_time_masks = parse_num(key, v)?,
            "augment.max_time_mask" => self.augment.max_time_mask = parse_num(key, v)?,
            "augment.n_freq_masks" => self.augment.n_freq_masks = parse_num(key, v)?,
            "augment.max_freq_mask" => self.augment.max_freq_mask = parse_num(key, v)?,
            "augment.pitch_shift_on" => self.augment.pitch_shift_on = parse_bool(key, v)?,
            "augment.pitch_shift_prob" => self.augment.pitch_shift_prob = parse_num(key, v)?,
            "augment.pitch_range_semitones" => {
                self.augment.pitch_range_semitones = parse_num(key, v)?
            }
            "seed" => self.seed = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parse a whole config file on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", i + 1))
            })?;
            cfg.apply(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    /// Canonical serialization: every key, grouped by section.
    pub fn serialize(&self) -> String {
        let stop = match self.stop_at_metric {
            None => "none".to_string(),
            Some(v) => format!("{v}"),
        };
        format!(
            "model.W={}\nmodel.s_m={}\nmodel.N={}\nmodel.head={}\n\
             train.task={}\ntrain.batch_size={}\ntrain.total_iterations={}\n\
             train.lr_policy={}\ntrain.lr={}\ntrain.eval_interval={}\n\
             train.ema_decay={}\ntrain.balanced_sampling={}\ntrain.stop_at_metric={}\n\
             features.window_len={}\nfeatures.hop={}\nfeatures.n_mels={}\n\
             features.f_min={}\nfeatures.f_max={}\nfeatures.log_floor={}\n\
             augment.t_c={}\naugment.mixup_alpha={}\naugment.mixup_variant={}\n\
             augment.specaugment_on={}\naugment.n_time_masks={}\naugment.max_time_mask={}\n\
             augment.n_freq_masks={}\naugment.max_freq_mask={}\naugment.pitch_shift_on={}\n\
             augment.pitch_shift_prob={}\naugment.pitch_range_semitones={}\nseed={}\n",
            self.model.w,
            self.model.s_m,
            self.model.n_classes,
            self.model.head.name(),
            self.task.name(),
            self.batch_size,
            self.total_iterations,
            self.lr_policy_kind.name(),
            self.lr,
            self.eval_interval,
            self.ema_decay,
            self.balanced_sampling,
            stop,
            self.features.window_len,
            self.features.hop,
            self.features.n_mels,
            self.features.f_min,
            self.features.f_max,
            self.features.log_floor,
            self.augment.t_c,
            self.augment.mixup_alpha,
            self.augment.mixup_variant.name(),
            self.augment.specaugment_on,
            self.augment.n_time_masks,
            self.augment.max_time_mask,
            self.augment.n_freq_masks,
            self.augment.max_freq_mask,
            self.augment.pitch_shift_on,
            self.augment.pitch_shift_prob,
            self.augment.pitch_range_semitones,
            self.seed,
        )
    }

    pub fn lr_policy(&self) -> LrPolicy {
        match self.lr_policy_kind {
            LrPolicyKind::OneCycle => LrPolicy::OneCycle { max: self.lr },
            LrPolicyKind::Constant => LrPolicy::Constant(self.lr),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::new(
            self.total_iterations,
            self.lr_policy(),
            self.augment.clone(),
            self.task,
            self.seed,
        );
        cfg.batch_size = self.batch_size;
        cfg.eval_interval = self.eval_interval;
        cfg.ema_decay = self.ema_decay;
        cfg.balanced_sampling = self.balanced_sampling;
        cfg.stop_at_metric = self.stop_at_metric;
        cfg.features = self.features.clone();
        cfg
    }

    /// Validate everything up front, before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.features.validate()?;
        self.train_config().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::MixupVariant;

    #[test]
    fn roundtrip_is_identity() {
        let mut cfg = RunConfig::default();
        cfg.model.w = 6;
        cfg.model.s_m = 1;
        cfg.model.head = Head::Softmax;
        cfg.task = Task::Classification;
        cfg.lr_policy_kind = LrPolicyKind::Constant;
        cfg.lr = 2e-4;
        cfg.stop_at_metric = Some(0.99);
        cfg.augment.mixup_variant = MixupVariant::ModifiedWaveform;
        cfg.augment.pitch_shift_on = true;
        cfg.seed = 1234;
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        // and the serialization itself is a fixed point
        assert_eq!(back.serialize(), text);
    }

    #[test]
    fn parse_overrides_defaults_and_flags_win() {
        let text = "# example\nmodel.W=6\n\ntrain.lr=0.0005\nseed=9\n";
        let mut cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model.w, 6);
        assert_eq!(cfg.lr, 0.0005);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.batch_size, 32); // untouched default
        cfg.apply("seed", "11").unwrap(); // a flag override lands last
        assert_eq!(cfg.seed, 11);
    }

    #[test]
    fn errors_name_the_key() {
        let err = RunConfig::parse("model.W=six\n").unwrap_err().to_string();
        assert!(err.contains("model.W"), "{err}");
        let err = RunConfig::parse("model.depth=3\n").unwrap_err().to_string();
        assert!(err.contains("model.depth"), "{err}");
        let err = RunConfig::parse("just words\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        let err = RunConfig::default().apply("train.lr_policy", "cosine").unwrap_err().to_string();
        assert!(err.contains("cosine"), "{err}");
    }

    #[test]
    fn validation_runs_before_work() {
        let mut cfg = RunConfig::default();
        cfg.model.s_m = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.augment.t_c = 0.25;
        assert!(cfg.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
