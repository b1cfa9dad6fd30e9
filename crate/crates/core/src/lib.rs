//! Multimodal residual quantization with distribution-matching reconstruction
//! and cross-modal alignment, embedding-collapse and forgetting diagnostics,
//! and a frequency-aware multimodal sequential recommender built on a small
//! causal transformer with low-rank adapters.

pub mod dataio;
pub mod diagnostics;
pub mod diffkit;
pub mod error;
pub mod losses;
pub mod quantizer;
pub mod registry;
pub mod rng;
pub mod seqrec;

pub use error::{MmqError, Result};
