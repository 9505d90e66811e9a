//! Waveforms, WAV files and synthetic mixtures.

mod synth;
mod wav;

pub use synth::{synth_mixture, SourceParams, SynthMode, SynthSpec};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// Mono signal with amplitudes nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// First `len` samples (or all of them if shorter).
    pub fn truncated(&self, len: usize) -> Waveform {
        Waveform {
            samples: self.samples[..len.min(self.samples.len())].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

/// A mixture together with the clean sources it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureTriple {
    pub id: String,
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
}

impl MixtureTriple {
    pub fn new(id: impl Into<String>, mixture: Waveform, sources: Vec<Waveform>) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::invalid("mixture without sources"));
        }
        for s in &sources {
            if s.len() != mixture.len() || s.sample_rate() != mixture.sample_rate() {
                return Err(Error::invalid(
                    "sources must match the mixture length and sample rate",
                ));
            }
        }
        Ok(Self {
            id: id.into(),
            mixture,
            sources,
        })
    }
}
