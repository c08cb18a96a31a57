//! Learnable structured pruning for a small FastSpeech-2-style transformer.
//!
//! Every prunable dimension of the model carries a vector of hard-concrete
//! gates. Training minimizes the TTS loss plus the density of the gated
//! network, gates are then thresholded, and the pruned channels and heads
//! are physically removed.

pub mod checkpoint;
pub mod compact;
pub mod config;
pub mod data;
pub mod error;
pub mod gates;
pub mod model;
pub mod optim;
pub mod par;
pub mod plan;
pub mod records;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
