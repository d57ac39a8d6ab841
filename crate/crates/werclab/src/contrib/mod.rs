//! Source-contribution measurement.
//!
//! Rewrites recorded attention blocks into exact per-token affine
//! contributions, converts them to row-stochastic relevance matrices,
//! composes the matrices across layers, and aggregates the resulting
//! source-vs-target split into sentence and corpus scores.

pub mod decompose;
pub mod report;
pub mod rollout;

pub use decompose::{
    decompose_attention_block, layer_contribution_matrix, BlockDecomposition, BlockKind,
    LayerContrib, RECONSTRUCTION_TOL,
};
pub use report::{sentence_source_shares, source_contribution, AnalysisSentence, ContributionReport};
pub use rollout::{decoder_rollout, encoder_rollout, fold_residual_into_self, RolloutResult};
