//! Desk-scale generative recommendation.
//!
//! Items are tokenized into fixed-length code sequences by residual k-means,
//! a small autoregressive scorer is trained with token-level cross-entropy
//! optionally combined with prefix-aware pointwise or pairwise losses whose
//! per-prefix weights follow a KL-regularized multiplicative update, and
//! recommendations are produced by trie-constrained beam search. An exhaustive
//! full-sort ranker serves as the oracle for auditing what beam search prunes.

pub mod config;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod synthetic;
pub mod theory;
pub mod tokenizer;
pub mod trainer;
pub mod weighting;

mod numeric;

pub use error::{Error, Result};
pub use numeric::{log_softmax, logsumexp, softplus};
