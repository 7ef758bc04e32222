//! Continuous per-second QoE prediction with a dilated causal convolutional
//! network, an LSTM baseline, and the training, evaluation, streaming and
//! benchmarking code around them.

pub mod bench;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod nn;
pub mod rng;
pub mod streaming;
pub mod training;

pub use error::{FormatError, QoeError, Result};
