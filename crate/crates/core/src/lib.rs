//! Activation-magnitude structured pruning for small LLaMA-style models.
//!
//! The crate trains desk-scale decoders, scores every attention head by the
//! l1 magnitude of its residual-stream contribution and every SwiGLU unit by
//! its mean absolute down-projection input, removes the lowest-scoring
//! structures uniformly per layer, and measures the result by perplexity and
//! greedy-decoding latency.

pub mod cli;
pub mod error;
pub mod evaluator;
pub mod io;
pub mod model;
pub mod parallel;
pub mod pruner;
pub mod scorer;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{ModelConfig, TokenId, TransformerWeights};
pub use tensor::Tensor;
