//! Desk-scale speaker identification toolkit: WAV and manifest handling,
//! a synthetic voice corpus, a reverse-mode autodiff core, a conv +
//! transformer encoder with self-supervised pretraining objectives
//! (quantized contrastive and masked cluster prediction), a classifier
//! head, training loops, and evaluation metrics.

pub mod audio_io;
pub mod classify;
pub mod encoder;
pub mod metrics;
pub mod numcore;
pub mod objectives;
pub mod synthgen;
pub mod cli;
pub mod trainer;

pub use cli::run;
