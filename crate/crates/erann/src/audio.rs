//! Waveform-level types and plumbing: mono conversion, resampling, and the
//! integer-second padding that later guarantees T_s = 128·t frames.

use crate::error::{Error, Result};

/// Canonical sample rate of the whole pipeline.
pub const CANONICAL_SR: u32 = 44100;

/// Mono waveform with optional soft label vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    /// Amplitudes in [-1, 1].
    pub samples: Vec<f32>,
    /// Hz, > 0.
    pub sample_rate: u32,
    /// Optional length-N target vector, every component in [0, 1].
    /// Soft labels appear after mixup.
    pub labels: Option<Vec<f32>>,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidAudio("empty waveform".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidAudio("sample rate must be positive".into()));
        }
        Ok(AudioClip { samples, sample_rate, labels: None })
    }

    pub fn with_labels(mut self, labels: Vec<f32>) -> Result<Self> {
        if labels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidInput("label components must lie in [0, 1]".into()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Root mean square amplitude, accumulated in f64.
    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    /// Clip duration in whole seconds after integer-second padding:
    /// t = ceil(len / sr).
    pub fn whole_seconds(&self) -> usize {
        let sr = self.sample_rate as usize;
        self.samples.len().div_ceil(sr)
    }
}

pub fn rms(samples: &[f32]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let sum: f64 = samples.iter().map(|&v| (v as f64) * (v as f64)).sum();
    (sum / samples.len() as f64).sqrt()
}

/// Average interleaved channels down to one, clamping into [-1, 1].
pub fn to_mono(interleaved: &[f32], n_channels: usize, sample_rate: u32) -> Result<AudioClip> {
    if n_channels == 0 || interleaved.is_empty() {
        return Err(Error::InvalidAudio("no channels or no samples".into()));
    }
    if interleaved.len() % n_channels != 0 {
        return Err(Error::InvalidAudio(format!(
            "{} samples do not divide into {} channels",
            interleaved.len(),
            n_channels
        )));
    }
    let frames = interleaved.len() / n_channels;
    let inv = 1.0f64 / n_channels as f64;
    let mut samples = Vec::with_capacity(frames);
    for f in 0..frames {
        let mut acc = 0.0f64;
        for c in 0..n_channels {
            acc += interleaved[f * n_channels + c] as f64;
        }
        samples.push((acc * inv).clamp(-1.0, 1.0) as f32);
    }
    AudioClip::new(samples, sample_rate)
}

/// Linear-interpolation resampler. Output length = round(len·target/source);
/// sample i reads source position i·source/target.
pub fn resample_linear(clip: &AudioClip, target_sr: u32) -> Result<AudioClip> {
    if target_sr == 0 {
        return Err(Error::InvalidConfig("target sample rate must be positive".into()));
    }
    if target_sr == clip.sample_rate {
        return Ok(clip.clone());
    }
    let src = &clip.samples;
    let ratio = clip.sample_rate as f64 / target_sr as f64;
    let out_len = ((src.len() as f64 / ratio).round() as usize).max(1);
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * ratio;
        let i0 = (pos.floor() as usize).min(src.len() - 1);
        let i1 = (i0 + 1).min(src.len() - 1);
        let frac = (pos - i0 as f64) as f32;
        out.push(src[i0] + (src[i1] - src[i0]) * frac);
    }
    let mut res = AudioClip::new(out, target_sr)?;
    res.labels = clip.labels.clone();
    Ok(res)
}

/// Zero-pad at the end so the duration reaches t = ceil(len/sr) whole
/// seconds. Appended zero count is always < one second of samples; the STFT
/// stage then emits exactly 128·t frames for the padded clip.
pub fn pad_for_frames(clip: &AudioClip) -> Result<AudioClip> {
    if clip.sample_rate != CANONICAL_SR {
        return Err(Error::InvalidAudio(format!(
            "padding law assumes {} Hz, got {}",
            CANONICAL_SR, clip.sample_rate
        )));
    }
    let t = clip.whole_seconds().max(1);
    let target = t * CANONICAL_SR as usize;
    let mut samples = clip.samples.clone();
    samples.resize(target, 0.0);
    let mut out = AudioClip::new(samples, clip.sample_rate)?;
    out.labels = clip.labels.clone();
    Ok(out)
}

/// Crop or zero-pad (at the tail) to exactly `len` samples.
pub fn fit_length(clip: &AudioClip, len: usize) -> Result<AudioClip> {
    if len == 0 {
        return Err(Error::InvalidConfig("target length must be positive".into()));
    }
    let mut samples = clip.samples.clone();
    samples.resize(len, 0.0);
    let mut out = AudioClip::new(samples, clip.sample_rate)?;
    out.labels = clip.labels.clone();
    Ok(out)
}

/// Pure sine test tone, amplitude `amp`, duration `seconds`.
pub fn sine_clip(freq_hz: f64, seconds: f64, sample_rate: u32, amp: f32) -> AudioClip {
    let n = (seconds * sample_rate as f64).round() as usize;
    let w = 2.0 * std::f64::consts::PI * freq_hz / sample_rate as f64;
    let samples = (0..n).map(|i| amp * (w * i as f64).sin() as f32).collect();
    AudioClip { samples, sample_rate, labels: None }
}
