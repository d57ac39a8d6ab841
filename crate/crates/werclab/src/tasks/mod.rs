//! Synthetic corpora with a controlled encoder-difficulty asymmetry.
//!
//! One underlying parallel language feeds three tasks:
//!
//! - `Mt`: source tokens -> target tokens (easy encoder: semantics only)
//! - `AsrAnalog`: noisy frame renderings -> source tokens (recognition)
//! - `StAnalog`: the *same* frame renderings -> target tokens
//!
//! Sources are drawn from a seeded first-order Markov chain so that the
//! target side has learnable language-model structure; targets apply a
//! token bijection plus a local pair swap so the task is not plain
//! copying. The speech-like tasks render each token as a variable
//! number of noisy prototype frames, which forces the encoder to learn
//! grouping on top of token identity.

pub mod batch;
pub mod io;

mod corpus;
mod frames;

pub use batch::{batch_iterator, Batch, PaddedBatch};
pub use corpus::{gen_parallel_corpus, LanguageTables, SynthLanguageSpec};
pub use frames::{render_frames, FrameRenderSpec, FrameRenderer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::mix_seed;

/// Reserved model-vocabulary ids; task tokens shift up by `SPECIALS`.
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SPECIALS: usize = 3;

/// Task-alphabet id -> model-vocabulary id.
pub fn model_id(task_id: usize) -> usize {
    task_id + SPECIALS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Text translation analog: token source, translated target.
    Mt,
    /// Recognition analog: frame source, transcript target.
    AsrAnalog,
    /// Speech translation analog: frame source, translated target.
    StAnalog,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Mt => "mt",
            TaskKind::AsrAnalog => "asr",
            TaskKind::StAnalog => "st",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mt" => Some(TaskKind::Mt),
            "asr" => Some(TaskKind::AsrAnalog),
            "st" => Some(TaskKind::StAnalog),
            _ => None,
        }
    }

    pub fn uses_frames(self) -> bool {
        !matches!(self, TaskKind::Mt)
    }
}

/// One training example. Sources are model-space token ids and, for
/// speech-like tasks, a frame matrix; targets are model-space ids
/// ending with EOS. Source tokens are always retained so the
/// recognition task can share the exact same rendered frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: usize,
    pub source_tokens: Vec<usize>,
    pub frames: Option<Tensor<f32>>,
    pub target: Vec<usize>,
}

impl Example {
    pub fn target_len(&self) -> usize {
        self.target.len()
    }

    /// BOS-prefixed, shifted-right decoder inputs.
    pub fn decoder_inputs(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.target.len());
        d.push(BOS);
        d.extend_from_slice(&self.target[..self.target.len() - 1]);
        d
    }

    pub fn validate(&self) -> Result<()> {
        if self.target.last() != Some(&EOS) {
            return Err(Error::InvalidConfig(format!("example {} target does not end with EOS", self.id)));
        }
        if self.source_tokens.is_empty() {
            return Err(Error::EmptyInput(format!("example {} has no source tokens", self.id)));
        }
        if let Some(f) = &self.frames {
            if f.rows() == 0 {
                return Err(Error::EmptyInput(format!("example {} has an empty frame matrix", self.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: TaskKind,
    pub examples: Vec<Example>,
}

#[derive(Debug, Clone)]
pub struct DatasetTriple {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSizes {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

impl SplitSizes {
    pub fn desk_default() -> Self {
        Self { n_train: 20000, n_valid: 1000, n_test: 1000 }
    }
}

/// Per-split sampling seeds; must be pairwise distinct.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSeeds {
    pub train: u64,
    pub valid: u64,
    pub test: u64,
}

impl SplitSeeds {
    pub fn derive(base: u64) -> Self {
        Self {
            train: mix_seed(base, &[101]),
            valid: mix_seed(base, &[202]),
            test: mix_seed(base, &[303]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train == self.valid || self.train == self.test || self.valid == self.test {
            return Err(Error::OverlappingSplitSeeds(vec![self.train, self.valid, self.test]));
        }
        Ok(())
    }
}

/// Builds disjoint train/valid/test splits of one task.
///
/// All three task kinds share the same underlying sentences per
/// (seed, split, index), and the two frame tasks share identical
/// rendered frames per index, so the only variable across tasks is
/// what the model must produce from which input.
pub fn make_task_dataset(
    kind: TaskKind,
    lang: &SynthLanguageSpec,
    frame_spec: &FrameRenderSpec,
    sizes: SplitSizes,
    seeds: SplitSeeds,
) -> Result<DatasetTriple> {
    seeds.validate()?;
    lang.validate()?;
    let tables = LanguageTables::build(lang);
    let renderer = if kind.uses_frames() { Some(FrameRenderer::new(frame_spec.clone())?) } else { None };

    let mut seen = std::collections::HashSet::new();
    let mut make_split = |split_seed: u64, n: usize| -> Result<Dataset> {
        let mut examples = Vec::with_capacity(n);
        for idx in 0..n {
            // resample on cross-split duplicates so splits stay disjoint
            let mut retry = 0u64;
            let (src, tgt) = loop {
                let (src, tgt) = corpus::sample_pair(lang, &tables, split_seed, idx as u64, retry);
                if seen.insert(src.clone()) {
                    break (src, tgt);
                }
                retry += 1;
                if retry > 1000 {
                    return Err(Error::InvalidConfig(
                        "could not sample a fresh sentence after 1000 retries; corpus too small for requested sizes"
                            .into(),
                    ));
                }
            };
            let source_tokens: Vec<usize> = src.iter().map(|&t| model_id(t)).collect();
            let frames = match &renderer {
                Some(r) => {
                    // frame seed depends only on (language seed, split, index):
                    // recognition and translation see identical renderings
                    let fseed = mix_seed(lang.seed, &[0xF0A3, split_seed, idx as u64, retry]);
                    Some(r.render(&src, fseed)?)
                }
                None => None,
            };
            let mut target: Vec<usize> = match kind {
                TaskKind::Mt | TaskKind::StAnalog => tgt.iter().map(|&t| model_id(t)).collect(),
                TaskKind::AsrAnalog => src.iter().map(|&t| model_id(t)).collect(),
            };
            target.push(EOS);
            let ex = Example { id: idx, source_tokens, frames, target };
            ex.validate()?;
            examples.push(ex);
        }
        Ok(Dataset { kind, examples })
    };

    let train = make_split(seeds.train, sizes.n_train)?;
    let valid = make_split(seeds.valid, sizes.n_valid)?;
    let test = make_split(seeds.test, sizes.n_test)?;
    Ok(DatasetTriple { train, valid, test })
}
