//! Self-training with a noisy student-teacher for streaming keyword spotting.
//!
//! The crate covers the whole pipeline: a log-mel frontend, a synthetic
//! keyword corpus, waveform and spectrogram augmentation, a small SVDF
//! encoder-decoder with hand-written gradients, supervised and distillation
//! losses, multi-generation student-teacher training, and FA/h-FR
//! evaluation.

pub mod augmentation;
pub mod data_io;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod losses;
pub mod model;
pub mod nn;
pub mod rng;
pub mod self_training;

pub use error::{KwsError, Result};
