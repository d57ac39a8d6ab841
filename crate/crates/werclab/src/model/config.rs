use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the decoder cross-attention output is merged with the residual
/// stream.
///
/// - `Standard`: plain sum `x_attn + x_res`.
/// - `WercNoNorm`: weighted sum `lambda * x_attn + (1 - lambda) * x_res`.
/// - `Werc`: weighted sum of parameter-free layer-normalized terms,
///   `lambda * LN(x_attn) + (1 - lambda) * LN(x_res)`, so both terms
///   enter at equal norm and contribute in the configured proportion.
/// - `WercNoWeights`: `Werc` with the weight pinned to 0.5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualVariant {
    Standard,
    Werc,
    WercNoNorm,
    WercNoWeights,
}

impl ResidualVariant {
    pub const ALL: [ResidualVariant; 4] = [
        ResidualVariant::Standard,
        ResidualVariant::Werc,
        ResidualVariant::WercNoNorm,
        ResidualVariant::WercNoWeights,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ResidualVariant::Standard => "standard",
            ResidualVariant::Werc => "werc",
            ResidualVariant::WercNoNorm => "werc_no_norm",
            ResidualVariant::WercNoWeights => "werc_no_weights",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standard" => Some(ResidualVariant::Standard),
            "werc" => Some(ResidualVariant::Werc),
            "werc_no_norm" => Some(ResidualVariant::WercNoNorm),
            "werc_no_weights" => Some(ResidualVariant::WercNoWeights),
            _ => None,
        }
    }
}

/// Source side of the model: token ids through an embedding table, or
/// continuous feature frames through mean-pooling plus a linear map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputMode {
    Tokens,
    Frames { feature_dim: usize, pool_stride: usize },
}

/// Full architecture description. `lambda` is only read by the Werc and
/// WercNoNorm variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_src: usize,
    pub vocab_tgt: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub residual_variant: ResidualVariant,
    pub lambda: f64,
    pub input_mode: InputMode,
}

/// Layer-norm epsilon used everywhere in the model, including the
/// parameter-free norms inside the Werc combiner.
pub const LN_EPS: f64 = 1e-5;

impl ModelConfig {
    /// Desk-scale text-to-text default: keeps the 2:1 encoder:decoder
    /// depth ratio and 4 heads of the full-size setup at a size that
    /// trains in seconds.
    pub fn desk_tokens(vocab_src: usize, vocab_tgt: usize) -> Self {
        Self {
            enc_layers: 4,
            dec_layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_src,
            vocab_tgt,
            max_len: 64,
            dropout: 0.1,
            residual_variant: ResidualVariant::Standard,
            lambda: 0.65,
            input_mode: InputMode::Tokens,
        }
    }

    /// Desk-scale speech-like default: same trunk with a frame front-end.
    pub fn desk_frames(feature_dim: usize, pool_stride: usize, vocab_tgt: usize) -> Self {
        let mut c = Self::desk_tokens(0, vocab_tgt);
        c.vocab_src = 0;
        c.input_mode = InputMode::Frames { feature_dim, pool_stride };
        c
    }

    /// Full-size speech configuration (12 encoder / 6 decoder layers,
    /// d_model 256, d_ff 2048, 4 heads). Constructible for scale checks;
    /// not used by the desk experiments.
    pub fn full_size_frames(feature_dim: usize, pool_stride: usize, vocab_tgt: usize) -> Self {
        Self {
            enc_layers: 12,
            dec_layers: 6,
            heads: 4,
            d_model: 256,
            d_ff: 2048,
            vocab_src: 0,
            vocab_tgt,
            max_len: 1024,
            dropout: 0.1,
            residual_variant: ResidualVariant::Standard,
            lambda: 0.65,
            input_mode: InputMode::Frames { feature_dim, pool_stride },
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Validates every field, collecting all violations into one error.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.enc_layers == 0 {
            problems.push("enc_layers must be >= 1".to_string());
        }
        if self.dec_layers == 0 {
            problems.push("dec_layers must be >= 1".to_string());
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            problems.push(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.d_model < 2 {
            problems.push("d_model must be >= 2".to_string());
        }
        if self.d_ff == 0 {
            problems.push("d_ff must be >= 1".to_string());
        }
        if self.vocab_tgt == 0 {
            problems.push("vocab_tgt must be >= 1".to_string());
        }
        if self.max_len == 0 {
            problems.push("max_len must be >= 1".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            problems.push(format!("lambda {} must be in (0, 1]", self.lambda));
        }
        match self.input_mode {
            InputMode::Tokens => {
                if self.vocab_src == 0 {
                    problems.push("vocab_src must be >= 1 in token mode".to_string());
                }
            }
            InputMode::Frames { feature_dim, pool_stride } => {
                if feature_dim == 0 {
                    problems.push("feature_dim must be >= 1".to_string());
                }
                if pool_stride == 0 {
                    problems.push("pool_stride must be >= 1".to_string());
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }

    /// The lambda actually applied by the combiner for this config.
    pub fn effective_lambda(&self) -> f64 {
        match self.residual_variant {
            ResidualVariant::WercNoWeights => 0.5,
            _ => self.lambda,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_is_valid_and_head_dim_16() {
        let c = ModelConfig::desk_tokens(103, 103);
        c.validate().unwrap();
        assert_eq!(c.head_dim(), 16);
    }

    #[test]
    fn invalid_fields_are_all_enumerated() {
        let mut c = ModelConfig::desk_tokens(103, 103);
        c.heads = 3; // 64 % 3 != 0
        c.lambda = 0.0;
        c.dropout = 1.0;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("multiple of heads"), "{msg}");
        assert!(msg.contains("lambda"), "{msg}");
        assert!(msg.contains("dropout"), "{msg}");
    }

    #[test]
    fn full_size_is_constructible() {
        let c = ModelConfig::full_size_frames(80, 4, 10000);
        c.validate().unwrap();
        assert_eq!(c.enc_layers, 12);
        assert_eq!(c.dec_layers, 6);
    }
}
