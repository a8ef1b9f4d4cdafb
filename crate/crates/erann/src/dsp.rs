//! Log-mel feature extraction: Hann STFT, triangular mel filterbank, log
//! compression, and the framing arithmetic that yields exactly 128 frames
//! per second of (padded) audio.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use sha2::{Digest, Sha256};

use crate::audio::{pad_for_frames, AudioClip, CANONICAL_SR};
use crate::error::{Error, Result};

/// Feature-extraction constants. Defaults follow the 44.1 kHz recipe:
/// 1380-sample Hann window, hop 345 (75% overlap), 128 mel bins over
/// 50..14000 Hz, additive floor before the log.
#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub window_len: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            window_len: 1380,
            hop: 345,
            n_mels: 128,
            f_min: 50.0,
            f_max: 14000.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.window_len == 0 {
            return Err(Error::InvalidConfig("window and hop must be positive".into()));
        }
        if self.window_len != 4 * self.hop {
            return Err(Error::InvalidConfig(format!(
                "window_len must be 4×hop (0.75 overlap), got {}/{}",
                self.window_len, self.hop
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::InvalidConfig("n_mels must be positive".into()));
        }
        if !(self.f_min > 0.0 && self.f_min < self.f_max) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < f_min < f_max, got {}..{}",
                self.f_min, self.f_max
            )));
        }
        if !self.log_floor.is_finite() || self.log_floor <= 0.0 {
            return Err(Error::InvalidConfig("log_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    /// Content hash used for feature-cache invalidation. Floats hash by their
    /// bit pattern so the key is exact.
    pub fn content_hash(&self) -> [u8; 32] {
        let canon = format!(
            "melconfig-v1|w={}|h={}|m={}|fmin={:016x}|fmax={:016x}|floor={:016x}",
            self.window_len,
            self.hop,
            self.n_mels,
            self.f_min.to_bits(),
            self.f_max.to_bits(),
            self.log_floor.to_bits()
        );
        let mut out = [0u8; 32];
        out.copy_from_slice(&Sha256::digest(canon.as_bytes()));
        out
    }
}

/// 128 × T_s log-energy matrix, with T_s = 128·t for t whole seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpec {
    pub n_mels: usize,
    pub t_s: usize,
    /// Whole-second clip duration backing the T_s = 128·t law.
    pub t_seconds: usize,
    /// Row-major [n_mels][t_s].
    pub values: Vec<f32>,
}

impl LogMelSpec {
    pub fn at(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.t_s + frame]
    }

    pub fn mean(&self) -> f32 {
        let sum: f64 = self.values.iter().map(|&v| v as f64).sum();
        (sum / self.values.len() as f64) as f32
    }
}

/// HTK mel scale.
pub fn mel_from_hz(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn hz_from_mel(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Periodic Hann window: w[n] = 0.5 − 0.5·cos(2πn/N).
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Frame count for a padded clip. Integer-second clips get the law
/// T_s = t·ceil(sr/hop) (128 frames/s at the canonical rate), realized by
/// truncating or zero-extending the raw floor(len/hop)+1 framing; other
/// lengths keep the raw count.
pub fn frame_count(len: usize, sample_rate: u32, hop: usize) -> usize {
    let sr = sample_rate as usize;
    if len > 0 && len % sr == 0 {
        (len / sr) * sr.div_ceil(hop)
    } else {
        len / hop + 1
    }
}

/// Appended zeros for a raw clip length under the whole pipeline
/// (integer-second padding); always < one second of samples.
pub fn padding_for_len(len: usize, sample_rate: u32) -> usize {
    let sr = sample_rate as usize;
    let t = len.div_ceil(sr).max(1);
    t * sr - len
}

/// Magnitude-squared Hann STFT with centered framing.
#[derive(Debug, Clone)]
pub struct PowerSpec {
    pub n_bins: usize,
    pub frames: usize,
    /// Row-major [frames][n_bins].
    data: Vec<f64>,
}

impl PowerSpec {
    pub fn at(&self, bin: usize, frame: usize) -> f64 {
        debug_assert!(bin < self.n_bins);
        self.data[frame * self.n_bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        &self.data[frame * self.n_bins..(frame + 1) * self.n_bins]
    }
}

/// Centered STFT power: the signal is conceptually extended by window_len/2
/// zeros on each side (frame k starts at k·hop − window_len/2); frames whose
/// window reaches past the signal read zeros, which also realizes the
/// integer-second frame law of [`frame_count`].
pub fn stft_power(clip: &AudioClip, cfg: &MelConfig) -> Result<PowerSpec> {
    cfg.validate()?;
    let len = clip.samples.len();
    if len < cfg.hop {
        return Err(Error::InvalidAudio(format!(
            "clip of {len} samples is shorter than one hop ({})",
            cfg.hop
        )));
    }
    let n_fft = cfg.window_len;
    let n_bins = cfg.n_bins();
    let frames = frame_count(len, clip.sample_rate, cfg.hop);
    let window = hann_periodic(n_fft);
    let half = n_fft / 2;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];

    let mut data = vec![0.0f64; frames * n_bins];
    for k in 0..frames {
        let start = (k * cfg.hop) as isize - half as isize;
        for (i, b) in buf.iter_mut().enumerate() {
            let idx = start + i as isize;
            let s = if idx >= 0 && (idx as usize) < len {
                clip.samples[idx as usize] as f64
            } else {
                0.0
            };
            *b = Complex::new(s * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        let row = &mut data[k * n_bins..(k + 1) * n_bins];
        for (bin, out) in row.iter_mut().enumerate() {
            *out = buf[bin].re * buf[bin].re + buf[bin].im * buf[bin].im;
        }
    }
    Ok(PowerSpec { n_bins, frames, data })
}

/// Triangular mel filterbank: `n_mels` unnormalized peak-1 triangles whose
/// centers are equally spaced on the mel scale between f_min and f_max.
#[derive(Debug, Clone)]
pub struct FilterBank {
    pub n_mels: usize,
    pub n_bins: usize,
    /// Row-major [n_mels][n_bins].
    pub weights: Vec<f64>,
    /// Triangle (left, center, right) corners in Hz, per filter.
    pub corners_hz: Vec<(f64, f64, f64)>,
}

pub fn mel_filterbank(cfg: &MelConfig, n_bins: usize, sample_rate: u32) -> Result<FilterBank> {
    cfg.validate()?;
    let nyquist = sample_rate as f64 / 2.0;
    if cfg.f_max > nyquist {
        return Err(Error::InvalidConfig(format!(
            "f_max {} exceeds Nyquist {nyquist}",
            cfg.f_max
        )));
    }
    let m_lo = mel_from_hz(cfg.f_min);
    let m_hi = mel_from_hz(cfg.f_max);
    let n_pts = cfg.n_mels + 2;
    let hz: Vec<f64> = (0..n_pts)
        .map(|i| hz_from_mel(m_lo + (m_hi - m_lo) * i as f64 / (n_pts - 1) as f64))
        .collect();

    // FFT length equals the window length, so bin b sits at b·sr/window_len Hz.
    let bin_hz = sample_rate as f64 / cfg.window_len as f64;
    let mut weights = vec![0.0f64; cfg.n_mels * n_bins];
    let mut corners = Vec::with_capacity(cfg.n_mels);
    for m in 0..cfg.n_mels {
        let (l, c, r) = (hz[m], hz[m + 1], hz[m + 2]);
        corners.push((l, c, r));
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (b, w) in row.iter_mut().enumerate() {
            let f = b as f64 * bin_hz;
            let up = (f - l) / (c - l);
            let down = (r - f) / (r - c);
            *w = up.min(down).max(0.0);
        }
    }
    Ok(FilterBank { n_mels: cfg.n_mels, n_bins, weights, corners_hz: corners })
}

/// Full feature pipeline: integer-second padding, centered Hann STFT, mel
/// filterbank, then ln(energy + floor). Output is n_mels × 128·t.
pub fn log_mel(clip: &AudioClip, cfg: &MelConfig) -> Result<LogMelSpec> {
    if clip.sample_rate != CANONICAL_SR {
        return Err(Error::InvalidAudio(format!(
            "feature pipeline expects {CANONICAL_SR} Hz input, got {}",
            clip.sample_rate
        )));
    }
    let padded = pad_for_frames(clip)?;
    let power = stft_power(&padded, cfg)?;
    let fb = mel_filterbank(cfg, power.n_bins, padded.sample_rate)?;
    let t_seconds = padded.len() / CANONICAL_SR as usize;
    let t_s = power.frames;

    let mut values = vec![0.0f32; cfg.n_mels * t_s];
    for frame in 0..t_s {
        let p = power.frame(frame);
        for m in 0..cfg.n_mels {
            let w = &fb.weights[m * power.n_bins..(m + 1) * power.n_bins];
            let mut acc = 0.0f64;
            for (wi, pi) in w.iter().zip(p.iter()) {
                acc += wi * pi;
            }
            values[m * t_s + frame] = (acc + cfg.log_floor).ln() as f32;
        }
    }
    Ok(LogMelSpec { n_mels: cfg.n_mels, t_s, t_seconds, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::sine_clip;

    #[test]
    fn hann_is_periodic_convention() {
        let w = hann_periodic(8);
        assert_eq!(w[0], 0.0);
        assert!((w[4] - 1.0).abs() < 1e-12); // peak at N/2
        for k in 1..8 {
            assert!((w[k] - w[8 - k]).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_counts_match_eq1_for_short_integer_clips() {
        // Brute-force frame enumeration: count hops whose start lies inside
        // the signal. For t ≤ 5 this agrees with floor(len/hop)+1 = 128t.
        let cfg = MelConfig::default();
        for t in 1..=5usize {
            let len = t * 44100;
            let mut oracle = 0usize;
            let mut start = 0usize;
            while start < len {
                oracle += 1;
                start += cfg.hop;
            }
            assert_eq!(oracle, len / cfg.hop + 1);
            assert_eq!(oracle, 128 * t);
            assert_eq!(frame_count(len, 44100, cfg.hop), 128 * t);
        }
        // From t = 6 on, the raw count falls short and the law zero-extends.
        assert_eq!(264_600 / 345 + 1, 767);
        assert_eq!(frame_count(264_600, 44100, 345), 768);
    }

    #[test]
    fn forced_framing_equals_minimal_extra_padding() {
        // Oracle: the smallest extra zero-pad that makes raw Eq.-1 framing
        // reach 768 frames for a 6 s clip is 15 samples.
        let hop = 345;
        let len = 264_600usize;
        let mut extra = 0usize;
        while (len + extra) / hop + 1 < 768 {
            extra += 1;
        }
        assert_eq!(extra, 15);

        // And the forced 768-frame STFT of the unpadded clip is bit-identical
        // to the raw-framed STFT of the zero-extended clip.
        let cfg = MelConfig::default();
        let clip = sine_clip(997.0, 6.0, 44100, 0.5);
        assert_eq!(clip.len(), len);
        let forced = stft_power(&clip, &cfg).unwrap();
        assert_eq!(forced.frames, 768);

        let mut padded = clip.samples.clone();
        padded.resize(len + extra, 0.0);
        let padded = crate::audio::AudioClip::new(padded, 44100).unwrap();
        assert_eq!(frame_count(padded.len(), 44100, hop), padded.len() / hop + 1);
        let raw = stft_power(&padded, &cfg).unwrap();
        assert_eq!(raw.frames, 768);
        for f in 0..768 {
            assert_eq!(forced.frame(f), raw.frame(f), "frame {f} differs");
        }
    }

    #[test]
    fn stft_zero_and_dc() {
        let cfg = MelConfig::default();
        let zero = crate::audio::AudioClip::new(vec![0.0; 44100], 44100).unwrap();
        let p = stft_power(&zero, &cfg).unwrap();
        assert_eq!((p.n_bins, p.frames), (691, 128));
        assert!(p.data.iter().all(|&v| v == 0.0));

        let dc = crate::audio::AudioClip::new(vec![1.0; 44100], 44100).unwrap();
        let p = stft_power(&dc, &cfg).unwrap();
        // periodic Hann concentrates a constant into bins 0 and 1; bin 0 wins
        for frame in 0..p.frames {
            let row = p.frame(frame);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, 0, "frame {frame}");
        }
    }

    #[test]
    fn sine_bin_matches_analytic_and_direct_dft() {
        let cfg = MelConfig::default();
        let clip = sine_clip(1000.0, 1.0, 44100, 0.8);
        let p = stft_power(&clip, &cfg).unwrap();
        assert_eq!(p.frames, 128);
        let expect = (1000.0f64 * 1380.0 / 44100.0).round() as usize;
        assert_eq!(expect, 31);
        for frame in 0..p.frames {
            let row = p.frame(frame);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, 31, "frame {frame}");
        }

        // direct O(n²) DFT oracle on one interior frame
        let window = hann_periodic(1380);
        let k = 64usize;
        let start = (k * cfg.hop) as isize - 690;
        let framed: Vec<f64> = (0..1380)
            .map(|i| {
                let idx = start + i as isize;
                let s = if idx >= 0 && (idx as usize) < clip.len() {
                    clip.samples[idx as usize] as f64
                } else {
                    0.0
                };
                s * window[i]
            })
            .collect();
        for bin in [0usize, 1, 30, 31, 32, 100, 345, 690] {
            let mut re = 0.0f64;
            let mut im = 0.0f64;
            for (i, &s) in framed.iter().enumerate() {
                let ph = -2.0 * std::f64::consts::PI * bin as f64 * i as f64 / 1380.0;
                re += s * ph.cos();
                im += s * ph.sin();
            }
            let oracle = re * re + im * im;
            let got = p.at(bin, k);
            let denom = oracle.abs().max(1e-9);
            assert!(
                (got - oracle).abs() / denom < 1e-6,
                "bin {bin}: {got} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn filterbank_shape_and_support() {
        let cfg = MelConfig::default();
        let fb = mel_filterbank(&cfg, cfg.n_bins(), 44100).unwrap();
        assert_eq!((fb.n_mels, fb.n_bins), (128, 691));
        for m in 0..fb.n_mels {
            let row = &fb.weights[m * fb.n_bins..(m + 1) * fb.n_bins];
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().sum::<f64>() > 0.0, "dead filter {m}");
        }
        for w in fb.corners_hz.windows(2) {
            assert!(w[1].1 > w[0].1, "centers must increase");
        }

        let bad = MelConfig { f_max: 30000.0, ..MelConfig::default() };
        assert!(mel_filterbank(&bad, 691, 44100).is_err());
    }

    #[test]
    fn log_mel_shapes_and_silence() {
        let cfg = MelConfig::default();
        let silent = crate::audio::AudioClip::new(vec![0.0; 5 * 44100], 44100).unwrap();
        let spec = log_mel(&silent, &cfg).unwrap();
        assert_eq!((spec.n_mels, spec.t_s, spec.t_seconds), (128, 640, 5));
        let expect = (1e-10f64).ln() as f32;
        assert!(spec.values.iter().all(|&v| v == expect));

        let ten = sine_clip(440.0, 10.0, 44100, 0.5);
        let spec = log_mel(&ten, &cfg).unwrap();
        assert_eq!((spec.n_mels, spec.t_s), (128, 1280));
    }

    #[test]
    fn log_mel_sine_lands_in_containing_filter() {
        let cfg = MelConfig::default();
        let clip = sine_clip(1000.0, 1.0, 44100, 0.8);
        let spec = log_mel(&clip, &cfg).unwrap();
        let fb = mel_filterbank(&cfg, cfg.n_bins(), 44100).unwrap();
        let containing: Vec<usize> = fb
            .corners_hz
            .iter()
            .enumerate()
            .filter(|(_, (l, _, r))| *l < 1000.0 && 1000.0 < *r)
            .map(|(m, _)| m)
            .collect();
        assert!(!containing.is_empty());

        // time-averaged energy per mel row
        let mut best = (0usize, f64::MIN);
        for m in 0..spec.n_mels {
            let avg: f64 = (0..spec.t_s).map(|f| spec.at(m, f) as f64).sum::<f64>();
            if avg > best.1 {
                best = (m, avg);
            }
        }
        assert!(
            containing.contains(&best.0),
            "argmax row {} not among filters containing 1 kHz: {containing:?}",
            best.0
        );
    }

    #[test]
    fn log_mel_deterministic_and_monotone_in_gain() {
        let cfg = MelConfig::default();
        let clip = sine_clip(500.0, 1.0, 44100, 0.3);
        let a = log_mel(&clip, &cfg).unwrap();
        let b = log_mel(&clip, &cfg).unwrap();
        assert_eq!(a.values, b.values);

        let doubled = crate::audio::AudioClip::new(
            clip.samples.iter().map(|&s| s * 2.0).collect(),
            44100,
        )
        .unwrap();
        let d = log_mel(&doubled, &cfg).unwrap();
        for (lo, hi) in a.values.iter().zip(&d.values) {
            assert!(hi >= lo, "doubling gain must not decrease log energy");
        }
    }
}
