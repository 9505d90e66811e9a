//! Time-frequency mask speech separation.
//!
//! The crate covers the whole training and evaluation loop for
//! mask-inference and deep-clustering separators:
//!
//! * [`audio`]: WAV I/O and a deterministic synthetic mixture generator.
//! * [`dsp`]: STFT/iSTFT, log-magnitude features, voice-activity weights.
//! * [`tensor`]: dense tensors with reverse-mode autodiff and Adam.
//! * [`losses`]: deep clustering, PIT mask-inference and chimera objectives.
//! * [`models`]: recurrent mask, embedding and two-headed networks.
//! * [`data`]: manifests, chunking and the `(inputs, labels)` batch contract.
//! * [`trainer`]: config-driven optimisation with early stopping and checkpoints.
//! * [`separator`]: mask application and embedding clustering at inference.
//! * [`metrics`]: permutation-aligned SDR evaluation.

pub mod audio;
pub mod config;
pub mod data;
pub mod dsp;
pub mod error;
pub mod exec;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod separator;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
