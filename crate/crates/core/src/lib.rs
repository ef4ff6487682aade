//! Uncertainty-aware test-time adaptation for text-to-image retrieval.
//!
//! The pipeline: embeddings in, cosine scores, cycle-consistent query
//! selection, disagreement-based uncertainty, then a few rounds of weighted
//! entropy minimization over a per-dimension affine head on the text side.
//!
//! With the `parallel` feature (on by default) per-row and per-query work runs
//! on rayon; every reduction happens in a fixed order, so results are the same
//! with or without it.

pub mod adapt;
pub mod ccs;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod par;
pub mod retrieval;
pub mod seed;
pub mod simulator;
pub mod uncertainty;

pub use error::{Error, Result};
