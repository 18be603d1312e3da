//! Segmented recurrent cross-attention.
//!
//! Queries attend to one contiguous segment of the encoder keys/values; the
//! rest of the sequence reaches them through a recurrent accumulate-and-fire
//! gate applied to the remainder key-value product. The crate provides the
//! reference attention identities, the gate, the training and stepwise
//! inference algorithms, a cost model with exact MAC accounting, and a small
//! encoder-decoder model for desk-scale experiments.

pub mod attention;
pub mod error;
pub mod numkit;
pub mod raf;
pub mod seq2seq;
pub mod srformer;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
