//! Sentence- and corpus-level source contribution.
//!
//! For every predicted token the rollout attributes the prediction
//! across raw source positions and target-prefix positions; the source
//! share is the summed source-column mass. Token scores average into a
//! sentence score, sentence scores into a corpus mean and std.

use super::decompose::{decompose_attention_block, layer_contribution_matrix, BlockKind, LayerContrib};
use super::rollout::{decoder_rollout, encoder_rollout};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::forward::{teacher_forward, Mode, ModelTrace, SourceInput};
use crate::model::params::ModelParams;
use crate::tensor::{Tape, Tensor};

/// Per-corpus source contribution record.
#[derive(Debug, Clone)]
pub struct ContributionReport {
    /// Per sentence, per predicted token: source share in [0, 1].
    pub per_token: Vec<Vec<f64>>,
    /// Mean source share per sentence.
    pub sentence_means: Vec<f64>,
    /// Unweighted mean over sentence scores.
    pub corpus_mean: f64,
    /// Population std over sentence scores.
    pub corpus_std: f64,
    /// Rows that fell back to a uniform contribution distribution.
    pub uniform_fallback_rows: usize,
    /// Empty sentences skipped with a warning.
    pub skipped_sentences: usize,
}

/// One analysis input sentence: a source and the teacher-forced decoder
/// inputs (BOS-shifted target).
pub struct AnalysisSentence<'a> {
    pub source_tokens: Option<&'a [usize]>,
    pub source_frames: Option<&'a Tensor<f64>>,
    pub decoder_inputs: &'a [usize],
}

/// Decomposes every attention block of one recorded pass and rolls the
/// contribution matrices out to raw inputs. Returns per-predicted-token
/// source shares.
pub fn sentence_source_shares(
    params: &ModelParams<f64>,
    config: &ModelConfig,
    trace: &ModelTrace<f64>,
) -> Result<(Vec<f64>, usize)> {
    let mut fallbacks = 0usize;

    let mut enc_layers: Vec<LayerContrib> = Vec::with_capacity(trace.enc_blocks.len());
    for (i, block) in trace.enc_blocks.iter().enumerate() {
        let dec = decompose_attention_block(
            params,
            config,
            block,
            BlockKind::SelfAttn {
                attn_prefix: &format!("enc.{i}.attn"),
                ln_prefix: &format!("enc.{i}.ln1"),
            },
        )?;
        let c = layer_contribution_matrix(&dec);
        fallbacks += c.uniform_fallback_rows.len();
        enc_layers.push(c);
    }
    let enc_map = encoder_rollout(&enc_layers)?;

    let mut dec_layers: Vec<(LayerContrib, LayerContrib)> = Vec::with_capacity(trace.dec_layers.len());
    for (i, layer) in trace.dec_layers.iter().enumerate() {
        let self_dec = decompose_attention_block(
            params,
            config,
            &layer.self_block,
            BlockKind::SelfAttn {
                attn_prefix: &format!("dec.{i}.self"),
                ln_prefix: &format!("dec.{i}.ln1"),
            },
        )?;
        let cross_dec = decompose_attention_block(
            params,
            config,
            &layer.cross_block,
            BlockKind::CrossAttn {
                attn_prefix: &format!("dec.{i}.cross"),
                variant: config.residual_variant,
                lambda: config.effective_lambda(),
            },
        )?;
        let sc = layer_contribution_matrix(&self_dec);
        let cc = layer_contribution_matrix(&cross_dec);
        fallbacks += sc.uniform_fallback_rows.len() + cc.uniform_fallback_rows.len();
        dec_layers.push((sc, cc));
    }

    let rolled = decoder_rollout(&dec_layers, &enc_map)?;
    // source + target share must both exist and sum to one per token
    rolled.check_rows()?;
    let shares: Vec<f64> = (0..rolled.rows()).map(|i| rolled.source_share(i)).collect();
    Ok((shares, fallbacks))
}

/// Runs the full pipeline over a corpus at verification precision.
pub fn source_contribution(
    params: &ModelParams<f64>,
    config: &ModelConfig,
    sentences: &[AnalysisSentence<'_>],
) -> Result<ContributionReport> {
    if sentences.is_empty() {
        return Err(Error::EmptyInput("contribution corpus".into()));
    }
    let mut per_token = Vec::with_capacity(sentences.len());
    let mut sentence_means = Vec::with_capacity(sentences.len());
    let mut fallbacks = 0usize;
    let mut skipped = 0usize;

    for s in sentences {
        if s.decoder_inputs.is_empty() {
            eprintln!("warning: skipping empty sentence in contribution analysis");
            skipped += 1;
            continue;
        }
        let mut tape: Tape<f64> = Tape::new();
        let source = match (s.source_tokens, s.source_frames.as_ref()) {
            (Some(ids), None) => SourceInput::Tokens(ids),
            (None, Some(f)) => SourceInput::Frames(f),
            _ => return Err(Error::InvalidConfig("analysis sentence needs exactly one source kind".into())),
        };
        let (_, trace) = teacher_forward(&mut tape, params, config, &source, s.decoder_inputs, Mode::Eval, true)?;
        let trace = trace.expect("trace requested");
        let (shares, fb) = sentence_source_shares(params, config, &trace)?;
        fallbacks += fb;
        let mean = shares.iter().sum::<f64>() / shares.len() as f64;
        per_token.push(shares);
        sentence_means.push(mean);
    }
    if sentence_means.is_empty() {
        return Err(Error::EmptyInput("every sentence was skipped".into()));
    }

    let n = sentence_means.len() as f64;
    let corpus_mean = sentence_means.iter().sum::<f64>() / n;
    let corpus_std =
        (sentence_means.iter().map(|m| (m - corpus_mean) * (m - corpus_mean)).sum::<f64>() / n).sqrt();
    Ok(ContributionReport {
        per_token,
        sentence_means,
        corpus_mean,
        corpus_std,
        uniform_fallback_rows: fallbacks,
        skipped_sentences: skipped,
    })
}
