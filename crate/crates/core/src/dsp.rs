//! Short-time Fourier analysis/synthesis and spectral features.
//!
//! Analysis and synthesis both use a periodic square-root Hann window. Their
//! product is a Hann window, which overlap-adds to a constant at a hop of a
//! quarter window; synthesis divides by the exact overlap envelope so the
//! fully overlapped interior is reconstructed to rounding error.

use std::f64::consts::PI;
use std::ops::Range;
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::tensor::Tensor;

pub const DEFAULT_LOG_FLOOR_DB: f64 = -80.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    #[default]
    SqrtHann,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_size: usize,
    pub hop_size: usize,
    #[serde(default)]
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_size: 256,
            hop_size: 64,
            window: WindowKind::SqrtHann,
        }
    }
}

impl StftConfig {
    pub fn new(window_size: usize, hop_size: usize) -> Result<Self> {
        let c = Self {
            window_size,
            hop_size,
            window: WindowKind::SqrtHann,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.window_size.is_power_of_two() || self.window_size < 2 {
            return Err(Error::invalid(format!(
                "window_size {} is not a power of two",
                self.window_size
            )));
        }
        if self.hop_size == 0 || self.hop_size > self.window_size {
            return Err(Error::invalid(format!(
                "hop_size {} must be in 1..={}",
                self.hop_size, self.window_size
            )));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    /// Frames produced for a signal of `len` samples (0 if shorter than a window).
    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.window_size {
            0
        } else {
            (len - self.window_size) / self.hop_size + 1
        }
    }

    /// Length of the signal `istft` returns for `frames` frames.
    pub fn signal_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop_size + self.window_size
        }
    }

    /// Samples covered by the full number of overlapping frames.
    pub fn interior(&self, frames: usize) -> Range<usize> {
        let start = self.window_size - self.hop_size;
        let end = frames * self.hop_size;
        start.min(end)..end
    }

    pub fn window(&self) -> Vec<f64> {
        let n = self.window_size as f64;
        (0..self.window_size)
            .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos()).sqrt())
            .collect()
    }
}

/// Complex STFT of one signal stored as magnitude and phase, `frames × bins`
/// row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub magnitude: Vec<f64>,
    pub phase: Vec<f64>,
}

impl Spectrogram {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            magnitude: vec![0.0; frames * bins],
            phase: vec![0.0; frames * bins],
        }
    }

    /// Frames `start..start+len`.
    pub fn frames_range(&self, start: usize, len: usize) -> Spectrogram {
        let r = start * self.bins..(start + len) * self.bins;
        Spectrogram {
            frames: len,
            bins: self.bins,
            magnitude: self.magnitude[r.clone()].to_vec(),
            phase: self.phase[r].to_vec(),
        }
    }
}

/// Batch of equally sized spectrograms as `B × T × F` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramBatch {
    pub magnitude: Tensor,
    pub phase: Tensor,
    pub config: StftConfig,
}

impl SpectrogramBatch {
    pub fn from_spectrograms(specs: &[Spectrogram], config: StftConfig) -> Result<Self> {
        let first = specs
            .first()
            .ok_or_else(|| Error::invalid("empty spectrogram batch"))?;
        if specs
            .iter()
            .any(|s| s.frames != first.frames || s.bins != first.bins)
        {
            return Err(Error::shape("SpectrogramBatch", "unequal spectrogram sizes"));
        }
        let shape = vec![specs.len(), first.frames, first.bins];
        let mag = specs.iter().flat_map(|s| s.magnitude.iter().copied()).collect();
        let ph = specs.iter().flat_map(|s| s.phase.iter().copied()).collect();
        Ok(Self {
            magnitude: Tensor::new(shape.clone(), mag)?,
            phase: Tensor::new(shape, ph)?,
            config,
        })
    }
}

/// Reusable FFT plans for one configuration.
pub struct Stft {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: config.window(),
            forward: planner.plan_fft_forward(config.window_size),
            inverse: planner.plan_fft_inverse(config.window_size),
            config,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn analyze(&self, samples: &[f64]) -> Result<Spectrogram> {
        let n = self.config.window_size;
        let frames = self.config.num_frames(samples.len());
        if frames == 0 {
            return Err(Error::invalid(format!(
                "signal of {} samples is shorter than one {n}-sample window",
                samples.len()
            )));
        }
        let bins = self.config.num_bins();
        let mut out = Spectrogram::zeros(frames, bins);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for t in 0..frames {
            let seg = &samples[t * self.config.hop_size..][..n];
            for ((b, &x), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = Complex::new(x * w, 0.0);
            }
            self.forward.process(&mut buf);
            buf[0].im = 0.0;
            buf[n / 2].im = 0.0;
            for k in 0..bins {
                let c = buf[k];
                out.magnitude[t * bins + k] = c.norm();
                let mut ph = c.im.atan2(c.re);
                if ph <= -PI {
                    ph = PI;
                }
                out.phase[t * bins + k] = ph;
            }
        }
        Ok(out)
    }

    /// Weighted overlap-add resynthesis.
    pub fn synthesize(&self, spec: &Spectrogram) -> Result<Vec<f64>> {
        let n = self.config.window_size;
        let hop = self.config.hop_size;
        let bins = self.config.num_bins();
        if spec.bins != bins
            || spec.magnitude.len() != spec.frames * bins
            || spec.phase.len() != spec.frames * bins
        {
            return Err(Error::shape(
                "istft",
                format!(
                    "spectrogram {}x{} does not match {bins} bins",
                    spec.frames, spec.bins
                ),
            ));
        }
        let len = self.config.signal_len(spec.frames);
        let mut out = vec![0.0; len];
        let mut env = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for t in 0..spec.frames {
            for k in 0..bins {
                let c = Complex::from_polar(spec.magnitude[t * bins + k], spec.phase[t * bins + k]);
                buf[k] = c;
                if k > 0 && k < n - k {
                    buf[n - k] = c.conj();
                }
            }
            buf[0].im = 0.0;
            buf[n / 2].im = 0.0;
            self.inverse.process(&mut buf);
            let off = t * hop;
            for i in 0..n {
                let w = self.window[i];
                out[off + i] += buf[i].re / n as f64 * w;
                env[off + i] += w * w;
            }
        }
        for (o, e) in out.iter_mut().zip(&env) {
            *o = if *e > 1e-10 { *o / e } else { 0.0 };
        }
        Ok(out)
    }
}

pub fn stft(waveform: &Waveform, config: &StftConfig) -> Result<Spectrogram> {
    Stft::new(*config)?.analyze(waveform.samples())
}

pub fn istft(spec: &Spectrogram, config: &StftConfig, sample_rate: u32) -> Result<Waveform> {
    let samples = Stft::new(*config)?.synthesize(spec)?;
    Waveform::new(samples, sample_rate)
}

/// STFT of many signals; runs in parallel under [`Exec::Parallel`].
pub fn stft_many(exec: Exec, signals: &[&[f64]], config: &StftConfig) -> Result<Vec<Spectrogram>> {
    let plan = Stft::new(*config)?;
    exec::try_map_with(exec, signals, |s| plan.analyze(s))
}

/// `20·log10(max(m, 10^(floor_db/20)))`, elementwise.
pub fn log_magnitude(magnitude: &[f64], floor_db: f64) -> Vec<f64> {
    let floor = 10f64.powf(floor_db / 20.0);
    magnitude
        .iter()
        .map(|&m| 20.0 * m.max(floor).log10())
        .collect()
}

pub fn log_magnitude_tensor(magnitude: &Tensor, floor_db: f64) -> Tensor {
    Tensor::new(
        magnitude.shape().to_vec(),
        log_magnitude(magnitude.data(), floor_db),
    )
    .expect("same size")
}

/// Binary voice-activity weights for one utterance.
///
/// A bin is active if, for at least one speaker, its energy relative to that
/// speaker's loudest bin in the utterance exceeds `beta` dB. A speaker with
/// no energy at all never activates a bin.
pub fn va_weights(clean_mags: &[&[f64]], beta: f64) -> Result<Vec<f64>> {
    let first = clean_mags
        .first()
        .ok_or_else(|| Error::invalid("va_weights needs at least one source"))?;
    if clean_mags.iter().any(|m| m.len() != first.len()) {
        return Err(Error::shape("va_weights", "source magnitudes differ in size"));
    }
    let mut w = vec![0.0; first.len()];
    for mags in clean_mags {
        let max_energy = mags.iter().fold(0.0f64, |m, v| m.max(v * v));
        if max_energy == 0.0 {
            continue;
        }
        for (wi, &m) in w.iter_mut().zip(mags.iter()) {
            if *wi == 0.0 && 10.0 * (m * m / max_energy).log10() > beta {
                *wi = 1.0;
            }
        }
    }
    Ok(w)
}

/// [`va_weights`] applied per batch item of `B × T × F` magnitudes.
pub fn va_weights_batch(clean_mags: &[Tensor], beta: f64) -> Result<Tensor> {
    let first = clean_mags
        .first()
        .ok_or_else(|| Error::invalid("va_weights needs at least one source"))?;
    if first.rank() != 3 || clean_mags.iter().any(|m| m.shape() != first.shape()) {
        return Err(Error::shape("va_weights_batch", "expected equal B×T×F tensors"));
    }
    let b = first.shape()[0];
    let per = first.len() / b.max(1);
    let mut out = Vec::with_capacity(first.len());
    for i in 0..b {
        let items: Vec<&[f64]> = clean_mags
            .iter()
            .map(|m| &m.data()[i * per..(i + 1) * per])
            .collect();
        out.extend(va_weights(&items, beta)?);
    }
    Tensor::new(first.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    fn naive_dft_mag(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &v) in x.iter().enumerate() {
                    let a = -2.0 * PI * (k * t) as f64 / n as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    #[test]
    fn frame_count_for_one_second() {
        let c = StftConfig::default();
        let s = Stft::new(c).unwrap().analyze(&vec![0.0; 8000]).unwrap();
        assert_eq!((s.frames, s.bins), (122, 129));
        assert!(s.magnitude.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn too_short_signal_is_an_error() {
        assert!(Stft::new(StftConfig::default())
            .unwrap()
            .analyze(&[0.0; 255])
            .is_err());
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(StftConfig::new(250, 64).is_err());
        assert!(StftConfig::new(256, 512).is_err());
        assert!(StftConfig::new(256, 0).is_err());
    }

    #[test]
    fn bin_centred_sinusoid_peaks_at_its_bin() {
        let c = StftConfig::default();
        let plan = Stft::new(c).unwrap();
        for k in [5usize, 17, 64, 100] {
            let x: Vec<f64> = (0..2000)
                .map(|t| (2.0 * PI * k as f64 * t as f64 / 256.0 + 0.3).sin())
                .collect();
            let s = plan.analyze(&x).unwrap();
            let w = c.window();
            for t in 0..s.frames {
                let row = &s.magnitude[t * 129..(t + 1) * 129];
                let arg = (0..129).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                assert_eq!(arg, k);
                let seg: Vec<f64> = x[t * 64..t * 64 + 256]
                    .iter()
                    .zip(&w)
                    .map(|(a, b)| a * b)
                    .collect();
                let oracle = naive_dft_mag(&seg);
                for (a, b) in row.iter().zip(&oracle) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn parseval_per_frame() {
        let c = StftConfig::default();
        let x = noise(3000, 11);
        let s = Stft::new(c).unwrap().analyze(&x).unwrap();
        let w = c.window();
        for t in 0..s.frames {
            let energy: f64 = x[t * 64..t * 64 + 256]
                .iter()
                .zip(&w)
                .map(|(a, b)| (a * b) * (a * b))
                .sum();
            let row = &s.magnitude[t * 129..(t + 1) * 129];
            let spec: f64 = row
                .iter()
                .enumerate()
                .map(|(k, m)| if k == 0 || k == 128 { m * m } else { 2.0 * m * m })
                .sum::<f64>()
                / 256.0;
            assert!((energy - spec).abs() <= 1e-6 * energy);
        }
    }

    #[test]
    fn dc_and_nyquist_are_real() {
        let s = Stft::new(StftConfig::default())
            .unwrap()
            .analyze(&noise(1000, 2))
            .unwrap();
        for t in 0..s.frames {
            for k in [0, 128] {
                let p = s.phase[t * 129 + k];
                assert!(p == 0.0 || p == PI);
            }
        }
        assert!(s.phase.iter().all(|&p| p > -PI && p <= PI));
    }

    #[test]
    fn zero_spectrogram_gives_silence() {
        let c = StftConfig::default();
        let y = Stft::new(c)
            .unwrap()
            .synthesize(&Spectrogram::zeros(10, 129))
            .unwrap();
        assert_eq!(y.len(), c.signal_len(10));
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synthesis_shape_mismatch() {
        let plan = Stft::new(StftConfig::default()).unwrap();
        assert!(plan.synthesize(&Spectrogram::zeros(10, 65)).is_err());
    }

    #[test]
    fn log_magnitude_values() {
        let v = log_magnitude(&[1.0, 0.0, 0.1], -80.0);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], -80.0);
        assert!((v[2] + 20.0).abs() < 1e-12);
    }

    #[test]
    fn va_weight_cases() {
        // Speaker maxima are 1.0 and 2.0.
        let a = [1.0, 1e-3, 0.0, 0.5];
        let b = [2.0, 2e-3, 0.0, 0.0];
        let w = va_weights(&[&a, &b], -20.0).unwrap();
        assert_eq!(w, vec![1.0, 0.0, 0.0, 1.0]);
        let w = va_weights(&[&a, &b], f64::NEG_INFINITY).unwrap();
        assert_eq!(w, vec![1.0, 1.0, 0.0, 1.0]);
        let silent = [0.0; 4];
        assert_eq!(va_weights(&[&silent], -20.0).unwrap(), vec![0.0; 4]);
        assert!(va_weights(&[], -20.0).is_err());
        assert!(va_weights(&[&a[..2], &b], -20.0).is_err());
    }
}
