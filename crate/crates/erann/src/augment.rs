//! Training-time augmentations: temporal crop, pitch shift, the four mixup
//! variants, and SpecAugment masking. Everything is a pure function of its
//! inputs plus an explicit [`RngStream`], so augmented batches reproduce
//! bit-exactly from a seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::audio::{fit_length, resample_linear, AudioClip};
use crate::dsp::LogMelSpec;
use crate::error::{Error, Result};

/// Deterministic random stream (ChaCha8). Substreams use ChaCha's native
/// stream parameter, so (seed, tag) pairs yield independent sequences.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn substream(seed: u64, tag: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(tag);
        RngStream { rng }
    }

    /// Uniform in [0, 1).
    pub fn unit(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in 0..=max (inclusive).
    pub fn upto(&mut self, max: usize) -> usize {
        self.rng.random_range(0..=max)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * self.unit()
    }

    /// Beta(alpha, alpha) draw for mixup ratios.
    pub fn beta(&mut self, alpha: f64) -> f64 {
        let dist = rand_distr::Beta::new(alpha, alpha).expect("alpha validated > 0");
        dist.sample(&mut self.rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixupVariant {
    None,
    StandardWaveform,
    ModifiedWaveform,
    ModifiedSpectrogram,
}

impl MixupVariant {
    /// Variant index 1..=4 as tabulated.
    pub fn from_table_index(i: usize) -> Result<Self> {
        match i {
            1 => Ok(MixupVariant::None),
            2 => Ok(MixupVariant::StandardWaveform),
            3 => Ok(MixupVariant::ModifiedWaveform),
            4 => Ok(MixupVariant::ModifiedSpectrogram),
            _ => Err(Error::InvalidConfig(format!("mixup variant index {i} not in 1..=4"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MixupVariant::None => "none",
            MixupVariant::StandardWaveform => "standard-waveform",
            MixupVariant::ModifiedWaveform => "modified-waveform",
            MixupVariant::ModifiedSpectrogram => "modified-spectrogram",
        }
    }
}

impl std::str::FromStr for MixupVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MixupVariant::None),
            "standard-waveform" => Ok(MixupVariant::StandardWaveform),
            "modified-waveform" => Ok(MixupVariant::ModifiedWaveform),
            "modified-spectrogram" => Ok(MixupVariant::ModifiedSpectrogram),
            other => Err(Error::InvalidConfig(format!("unknown mixup variant '{other}'"))),
        }
    }
}

/// All augmentation knobs for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Crop length in seconds; whole seconds keep T_s a multiple of 128.
    pub t_c: f64,
    pub mixup_alpha: f64,
    pub mixup_variant: MixupVariant,
    pub specaugment_on: bool,
    pub n_time_masks: usize,
    /// Maximum time-mask length in frames (8·t_c by convention).
    pub max_time_mask: usize,
    pub n_freq_masks: usize,
    pub max_freq_mask: usize,
    pub pitch_shift_on: bool,
    pub pitch_shift_prob: f64,
    pub pitch_range_semitones: f64,
}

impl AugmentConfig {
    /// Defaults for a given crop length: 2 time masks up to 8·t_c frames,
    /// 2 frequency masks up to 16 bins, pitch shift ±2 semitones at p=0.5.
    pub fn for_crop_seconds(t_c: f64) -> Self {
        AugmentConfig {
            t_c,
            mixup_alpha: 1.0,
            mixup_variant: MixupVariant::None,
            specaugment_on: false,
            n_time_masks: 2,
            max_time_mask: (8.0 * t_c).round() as usize,
            n_freq_masks: 2,
            max_freq_mask: 16,
            pitch_shift_on: false,
            pitch_shift_prob: 0.5,
            pitch_range_semitones: 2.0,
        }
    }

    /// Crop-only pipeline: no mixup, no masking, no pitch shift.
    pub fn off(t_c: f64) -> Self {
        AugmentConfig::for_crop_seconds(t_c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_c > 0.0) {
            return Err(Error::InvalidConfig("t_c must be positive".into()));
        }
        if !(self.mixup_alpha > 0.0) {
            return Err(Error::InvalidConfig("mixup_alpha must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pitch_shift_prob) {
            return Err(Error::InvalidConfig("pitch_shift_prob must lie in [0, 1]".into()));
        }
        if self.pitch_range_semitones < 0.0 {
            return Err(Error::InvalidConfig("pitch range must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Contiguous t_c-second section at a uniformly random start. Clips shorter
/// than the crop are zero-padded first. Labels pass through unchanged.
pub fn temporal_crop(clip: &AudioClip, t_c: f64, rng: &mut RngStream) -> Result<AudioClip> {
    if !(t_c > 0.0) {
        return Err(Error::InvalidConfig("crop length must be positive".into()));
    }
    let target = ((t_c * clip.sample_rate as f64).round() as usize).max(1);
    if clip.len() <= target {
        return fit_length(clip, target);
    }
    let start = rng.upto(clip.len() - target);
    let mut out = AudioClip::new(clip.samples[start..start + target].to_vec(), clip.sample_rate)?;
    out.labels = clip.labels.clone();
    Ok(out)
}

/// Mixing weight of the sound-pressure-aware variant:
/// p = 1 / (1 + 10^((G1−G2)/20)·(1−r)/r) with G = 20·log10(RMS), which
/// collapses to p = 1 / (1 + (rms1/rms2)·(1−r)/r).
pub fn modified_mix_weight(rms1: f64, rms2: f64, r: f64) -> f64 {
    1.0 / (1.0 + (rms1 / rms2) * (1.0 - r) / r)
}

pub fn mix_labels(y1: Option<&[f32]>, y2: Option<&[f32]>, r: f64) -> Option<Vec<f32>> {
    match (y1, y2) {
        (Some(a), Some(b)) if a.len() == b.len() => Some(
            a.iter()
                .zip(b)
                .map(|(&p, &q)| (r * p as f64 + (1.0 - r) * q as f64) as f32)
                .collect(),
        ),
        _ => None,
    }
}

/// Waveform mixup. `Standard` blends linearly; `Modified` weighs the clips
/// by their sound-pressure gains and renormalizes the output energy; a
/// silent clip makes the modified variant fall back to standard mixing.
/// Labels mix by r in both variants.
pub fn mixup(
    clip1: &AudioClip,
    clip2: &AudioClip,
    r: f64,
    variant: MixupVariant,
) -> Result<AudioClip> {
    if clip1.len() != clip2.len() || clip1.sample_rate != clip2.sample_rate {
        return Err(Error::InvalidInput(format!(
            "mixup needs equal lengths and rates, got {}@{} vs {}@{}",
            clip1.len(),
            clip1.sample_rate,
            clip2.len(),
            clip2.sample_rate
        )));
    }
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::InvalidInput(format!("mixup ratio must lie in (0,1), got {r}")));
    }
    let (w1, w2) = match variant {
        MixupVariant::StandardWaveform => (r, 1.0 - r),
        MixupVariant::ModifiedWaveform => {
            let (rms1, rms2) = (clip1.rms(), clip2.rms());
            if rms1 == 0.0 || rms2 == 0.0 {
                (r, 1.0 - r)
            } else {
                let p = modified_mix_weight(rms1, rms2, r);
                let norm = (p * p + (1.0 - p) * (1.0 - p)).sqrt();
                (p / norm, (1.0 - p) / norm)
            }
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "mixup on waveforms cannot apply variant '{}'",
                other.name()
            )))
        }
    };
    let samples = clip1
        .samples
        .iter()
        .zip(&clip2.samples)
        .map(|(&a, &b)| (w1 * a as f64 + w2 * b as f64) as f32)
        .collect();
    let mut out = AudioClip::new(samples, clip1.sample_rate)?;
    out.labels = mix_labels(clip1.labels.as_deref(), clip2.labels.as_deref(), r);
    Ok(out)
}

/// Modified mixup applied entrywise on log-mel spectrograms. The gains use
/// the linear-power mean of each spectrogram: RMS_i = sqrt(mean(exp(spec_i))).
/// Label mixing (by r) is the caller's job since spectrograms carry none.
pub fn mixup_spec(spec1: &LogMelSpec, spec2: &LogMelSpec, r: f64) -> Result<LogMelSpec> {
    if spec1.n_mels != spec2.n_mels || spec1.t_s != spec2.t_s {
        return Err(Error::InvalidInput(format!(
            "spectrogram mixup needs equal shapes, got {}x{} vs {}x{}",
            spec1.n_mels, spec1.t_s, spec2.n_mels, spec2.t_s
        )));
    }
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::InvalidInput(format!("mixup ratio must lie in (0,1), got {r}")));
    }
    let energy = |s: &LogMelSpec| {
        let mean: f64 =
            s.values.iter().map(|&v| (v as f64).exp()).sum::<f64>() / s.values.len() as f64;
        mean.sqrt()
    };
    let p = modified_mix_weight(energy(spec1), energy(spec2), r);
    let norm = (p * p + (1.0 - p) * (1.0 - p)).sqrt();
    let (w1, w2) = (p / norm, (1.0 - p) / norm);
    let values = spec1
        .values
        .iter()
        .zip(&spec2.values)
        .map(|(&a, &b)| (w1 * a as f64 + w2 * b as f64) as f32)
        .collect();
    Ok(LogMelSpec {
        n_mels: spec1.n_mels,
        t_s: spec1.t_s,
        t_seconds: spec1.t_seconds,
        values,
    })
}

/// SpecAugment: exactly `n_time_masks` time masks (length ~ U{0..max}) and
/// `n_freq_masks` frequency masks, all filled with the pre-mask spectrogram
/// mean. Masks are clipped at the boundaries.
pub fn spec_augment(spec: &LogMelSpec, cfg: &AugmentConfig, rng: &mut RngStream) -> LogMelSpec {
    let mut out = spec.clone();
    if spec.t_s == 0 {
        return out;
    }
    let fill = spec.mean();
    for _ in 0..cfg.n_time_masks {
        let len = rng.upto(cfg.max_time_mask).min(spec.t_s);
        let start = rng.upto(spec.t_s - len);
        for m in 0..spec.n_mels {
            for f in start..start + len {
                out.values[m * spec.t_s + f] = fill;
            }
        }
    }
    for _ in 0..cfg.n_freq_masks {
        let len = rng.upto(cfg.max_freq_mask).min(spec.n_mels);
        let start = rng.upto(spec.n_mels - len);
        for m in start..start + len {
            for f in 0..spec.t_s {
                out.values[m * spec.t_s + f] = fill;
            }
        }
    }
    out
}

/// Pitch shift by a fixed semitone offset: resample by 2^(s/12), reinterpret
/// at the original rate, then crop/pad the tail back to the original length.
pub fn pitch_shift_by(clip: &AudioClip, semitones: f64) -> Result<AudioClip> {
    let factor = 2f64.powf(semitones / 12.0);
    let target_sr = ((clip.sample_rate as f64 / factor).round() as u32).max(1);
    let resampled = resample_linear(clip, target_sr)?;
    let mut shifted = AudioClip::new(resampled.samples, clip.sample_rate)?;
    shifted.labels = clip.labels.clone();
    fit_length(&shifted, clip.len())
}

/// With probability `pitch_shift_prob`, shift by s ~ U(−range, +range)
/// semitones; otherwise return the clip unchanged.
pub fn pitch_shift(clip: &AudioClip, rng: &mut RngStream, cfg: &AugmentConfig) -> Result<AudioClip> {
    if !cfg.pitch_shift_on || rng.unit() >= cfg.pitch_shift_prob {
        return Ok(clip.clone());
    }
    let s = rng.uniform(-cfg.pitch_range_semitones, cfg.pitch_range_semitones);
    pitch_shift_by(clip, s)
}
