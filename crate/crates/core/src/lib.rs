//! Out-of-distribution detection downstream of an image tagging model.
//!
//! Attention maps of in-distribution tags select object features from the
//! backbone grid; a small self-attention projector trained with cross-entropy
//! and a pull toward EMA-maintained class centers maps them to a space where
//! the maximum cosine similarity to any center is the OOD score.


pub mod centers;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod decompose;
pub mod error;
pub mod metrics;
pub mod net;
pub mod score;
pub mod sim;
pub mod store;
pub mod train;

pub use error::{Error, Result};
