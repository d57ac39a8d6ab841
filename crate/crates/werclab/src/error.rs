use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape for {op}: {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },

    #[error("id {id} out of range for table with {rows} rows")]
    IdOutOfRange { id: usize, rows: usize },

    #[error("division by zero in layer_norm: constant input with eps = 0")]
    LayerNormDegenerate,

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("sequence length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("contribution decomposition failed internal reconstruction: max |err| = {max_err:.3e} (limit {limit:.1e})")]
    Reconstruction { max_err: f64, limit: f64 },

    #[error("contribution matrix row {row} is not stochastic: sum = {sum}")]
    NonStochasticRow { row: usize, sum: f64 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("example with {tokens} target tokens exceeds batch cap {cap}")]
    ExampleExceedsCap { tokens: usize, cap: usize },

    #[error("split seeds must be pairwise distinct, got {0:?}")]
    OverlappingSplitSeeds(Vec<u64>),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("training aborted at step {step}: {reason}")]
    TrainAborted { step: usize, reason: String },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;
