use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{MixtureTriple, Waveform};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

const PEAK_TARGET: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    Harmonic,
    Bandnoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SourceParams {
    Harmonic {
        f0: f64,
        #[serde(default = "default_harmonics")]
        num_harmonics: usize,
    },
    Band {
        low_hz: f64,
        high_hz: f64,
    },
}

fn default_harmonics() -> usize {
    8
}

fn default_separable() -> bool {
    true
}

/// Recipe for a synthetic mixture.
///
/// Each source is normalised to unit RMS, scaled by a random level in
/// `±level_jitter_db / 2`, and (if `envelope_rate_hz > 0`) shaped by a
/// piecewise-linear on/off amplitude envelope to create silent regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_sources: usize,
    pub duration_s: f64,
    #[serde(default = "default_rate")]
    pub sample_rate: u32,
    pub mode: SynthMode,
    pub sources: Vec<SourceParams>,
    #[serde(default = "default_separable")]
    pub separable: bool,
    #[serde(default)]
    pub level_jitter_db: f64,
    #[serde(default)]
    pub envelope_rate_hz: f64,
}

fn default_rate() -> u32 {
    super::DEFAULT_SAMPLE_RATE
}

impl SynthSpec {
    /// Two harmonic sources with the given fundamentals.
    pub fn harmonic(f0s: &[f64], duration_s: f64) -> Self {
        Self {
            num_sources: f0s.len(),
            duration_s,
            sample_rate: super::DEFAULT_SAMPLE_RATE,
            mode: SynthMode::Harmonic,
            sources: f0s
                .iter()
                .map(|&f0| SourceParams::Harmonic {
                    f0,
                    num_harmonics: default_harmonics(),
                })
                .collect(),
            separable: true,
            level_jitter_db: 0.0,
            envelope_rate_hz: 0.0,
        }
    }

    /// Band-limited noise sources, one per `(low, high)` band.
    pub fn bandnoise(bands: &[(f64, f64)], duration_s: f64) -> Self {
        Self {
            num_sources: bands.len(),
            duration_s,
            sample_rate: super::DEFAULT_SAMPLE_RATE,
            mode: SynthMode::Bandnoise,
            sources: bands
                .iter()
                .map(|&(low_hz, high_hz)| SourceParams::Band { low_hz, high_hz })
                .collect(),
            separable: true,
            level_jitter_db: 0.0,
            envelope_rate_hz: 0.0,
        }
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * f64::from(self.sample_rate)).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_sources < 1 {
            return Err(Error::invalid("synth spec needs at least one source"));
        }
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return Err(Error::invalid("synth duration must be positive"));
        }
        if self.sample_rate == 0 {
            return Err(Error::invalid("synth sample rate must be positive"));
        }
        if self.sources.len() != self.num_sources {
            return Err(Error::invalid(format!(
                "num_sources = {} but {} source entries",
                self.num_sources,
                self.sources.len()
            )));
        }
        let nyquist = f64::from(self.sample_rate) / 2.0;
        for s in &self.sources {
            match (self.mode, s) {
                (SynthMode::Harmonic, SourceParams::Harmonic { f0, num_harmonics }) => {
                    if !(*f0 > 0.0 && *f0 < nyquist) || *num_harmonics == 0 {
                        return Err(Error::invalid(format!("bad harmonic source f0 = {f0}")));
                    }
                }
                (SynthMode::Bandnoise, SourceParams::Band { low_hz, high_hz }) => {
                    if !(*low_hz >= 0.0 && low_hz < high_hz && *high_hz <= nyquist) {
                        return Err(Error::invalid(format!(
                            "bad band [{low_hz}, {high_hz}] Hz"
                        )));
                    }
                }
                _ => return Err(Error::invalid("source parameters do not match mode")),
            }
        }
        if self.separable {
            for (i, a) in self.sources.iter().enumerate() {
                for b in &self.sources[i + 1..] {
                    let overlap = match (a, b) {
                        (
                            SourceParams::Band {
                                low_hz: la,
                                high_hz: ha,
                            },
                            SourceParams::Band {
                                low_hz: lb,
                                high_hz: hb,
                            },
                        ) => la < hb && lb < ha,
                        (SourceParams::Harmonic { f0: fa, .. }, SourceParams::Harmonic { f0: fb, .. }) => {
                            (fa - fb).abs() < 1e-9
                        }
                        _ => false,
                    };
                    if overlap {
                        return Err(Error::invalid(
                            "separable mode requires disjoint bands / distinct fundamentals",
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

fn unit_rms(x: &mut [f64]) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
}

fn harmonic_tone(rng: &mut Rng, f0: f64, num_harmonics: usize, n: usize, sr: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for h in 1..=num_harmonics {
        let f = f0 * h as f64;
        let phase = rng.random::<f64>() * 2.0 * PI;
        if f >= sr / 2.0 {
            continue;
        }
        let amp = 1.0 / h as f64;
        for (t, o) in out.iter_mut().enumerate() {
            *o += amp * (2.0 * PI * f * t as f64 / sr + phase).sin();
        }
    }
    out
}

fn band_noise(rng: &mut Rng, low: f64, high: f64, n: usize, sr: f64) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        let f = bin as f64 * sr / n as f64;
        if f < low || f > high {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

fn envelope(rng: &mut Rng, rate_hz: f64, n: usize, sr: f64) -> Vec<f64> {
    let step = (sr / rate_hz).max(1.0);
    let points = (n as f64 / step).ceil() as usize + 2;
    let mut nodes: Vec<f64> = (0..points)
        .map(|_| {
            if rng.random::<f64>() < 0.25 {
                0.0
            } else {
                rng.random_range(0.3..1.0)
            }
        })
        .collect();
    // A source must never be silent throughout.
    let used = ((n.saturating_sub(1)) as f64 / step).floor() as usize + 2;
    if nodes[..used.min(points)].iter().all(|&v| v == 0.0) {
        nodes[0] = 1.0;
    }
    (0..n)
        .map(|t| {
            let pos = t as f64 / step;
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            nodes[i] * (1.0 - frac) + nodes[i + 1] * frac
        })
        .collect()
}

/// Generate one mixture and its sources. Identical `(spec, seed)` always
/// yields identical samples.
pub fn synth_mixture(spec: &SynthSpec, seed: u64) -> Result<MixtureTriple> {
    spec.validate()?;
    let n = spec.num_samples();
    let sr = f64::from(spec.sample_rate);
    let mut rng = rng::stream(seed, rng::tags::SYNTH);
    let mut sources: Vec<Vec<f64>> = Vec::with_capacity(spec.num_sources);
    for p in &spec.sources {
        let mut s = match *p {
            SourceParams::Harmonic { f0, num_harmonics } => {
                harmonic_tone(&mut rng, f0, num_harmonics, n, sr)
            }
            SourceParams::Band { low_hz, high_hz } => band_noise(&mut rng, low_hz, high_hz, n, sr),
        };
        unit_rms(&mut s);
        let jitter = if spec.level_jitter_db > 0.0 {
            rng.random_range(-0.5..0.5) * spec.level_jitter_db
        } else {
            0.0
        };
        let gain = 10f64.powf(jitter / 20.0);
        if spec.envelope_rate_hz > 0.0 {
            let env = envelope(&mut rng, spec.envelope_rate_hz, n, sr);
            s.iter_mut().zip(&env).for_each(|(v, e)| *v *= gain * e);
        } else {
            s.iter_mut().for_each(|v| *v *= gain);
        }
        sources.push(s);
    }
    let mut mixture = vec![0.0; n];
    for s in &sources {
        mixture.iter_mut().zip(s).for_each(|(m, v)| *m += v);
    }
    let peak = std::iter::once(&mixture)
        .chain(&sources)
        .flat_map(|x| x.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let scale = PEAK_TARGET / peak;
        mixture.iter_mut().for_each(|v| *v *= scale);
        for s in &mut sources {
            s.iter_mut().for_each(|v| *v *= scale);
        }
    }
    let mixture = Waveform::new(mixture, spec.sample_rate)?;
    let sources = sources
        .into_iter()
        .map(|s| Waveform::new(s, spec.sample_rate))
        .collect::<Result<Vec<_>>>()?;
    MixtureTriple::new(format!("synth-{seed}"), mixture, sources)
}
