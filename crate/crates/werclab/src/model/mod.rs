//! Pre-LN encoder-decoder transformer with pluggable cross-attention
//! residual combination.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;

pub use checkpoint::{load_checkpoint, load_checkpoint_f64, save_checkpoint};
pub use config::{InputMode, ModelConfig, ResidualVariant, LN_EPS};
pub use forward::{
    attention_mask, combine_cross_residual, dropout, positional_encoding, teacher_forward,
    BlockTrace, BoundParams, DecLayerTrace, ForwardCtx, Mode, ModelTrace, SourceInput,
};
pub use params::{build_model, is_decoder_param, param_count, reinit_decoder, ModelParams};
