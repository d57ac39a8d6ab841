//! werclab: a desk-scale encoder-decoder transformer laboratory.
//!
//! The crate trains small pre-LN encoder-decoder transformers on
//! synthetic translation tasks, swaps the decoder's cross-attention
//! residual for a weighted, normalized combination (WeRC), and measures
//! how much of each prediction is driven by the source sequence versus
//! the target prefix across training checkpoints.
//!
//! Start with the guide in `book/` or the modules below:
//!
//! - [`tensor`]: dense tensors + reverse-mode autodiff tape
//! - [`model`]: the transformer, residual variants, checkpoints
//! - [`contrib`]: source-contribution decomposition and rollout
//! - [`tasks`]: synthetic corpora (text-like and speech-like)
//! - [`train`]: optimization loop and experiment pipelines
//! - [`eval`]: decoding, BLEU, contribution curves, reports

pub mod contrib;
pub mod error;
pub mod model;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
