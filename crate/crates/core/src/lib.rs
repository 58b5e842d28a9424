//! Layer pruning of decoder-only transformers into text encoders.
//!
//! The pipeline profiles the contrastive loss of every layer's pooled output,
//! picks prune points from the profile, truncates the model, finetunes it with
//! low-rank adapters and scores it on a synthetic embedding suite.

pub mod adapt;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numeric;
pub mod objective;
pub mod pooling;
pub mod profiler;
pub mod prune;

pub use error::{Error, Result};
