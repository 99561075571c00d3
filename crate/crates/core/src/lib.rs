//! Weakly supervised audio source separation trained with an
//! energy-preserving Wasserstein objective.
//!
//! The crate covers the whole path: WAV and spectrogram handling, corpus
//! sampling without mixture/source pairing, the multi-decoder separator and
//! per-source critics, the losses and alternating trainer, and BSS-style
//! evaluation.

pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod signal;
pub mod tensor;
pub mod training;
pub mod wav;

pub use error::{Error, Result};
