//! Efficient residual audio neural networks.
//!
//! End-to-end audio-recognition toolkit: log-mel feature extraction, the
//! training-time augmentation suite (temporal crop, pitch shift, mixup
//! variants, SpecAugment), a small reverse-mode autodiff engine with verified
//! gradients, the W/s_m-parameterized residual CNN with parameter/MAC
//! analysis, a training/evaluation harness, and the CLI gluing it together.

pub mod audio;
pub mod augment;
pub mod cli;
pub mod data;
pub mod dsp;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod runconfig;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod wav;

pub use error::{Error, Result};
