use std::path::PathBuf;

use thiserror::Error;

use crate::io::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: shape {shape:?} with {len} elements")]
    InvalidTensor { shape: Vec<usize>, len: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("token id {id} at position {position} is outside vocab of {vocab}")]
    TokenOutOfRange {
        id: u32,
        position: usize,
        vocab: usize,
    },

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("{what} index {index} out of range (have {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("calibration sample {index} has {len} tokens (allowed 1..={max})")]
    BadSample { index: usize, len: usize, max: usize },

    #[error("requested ratio {requested} is infeasible; max achievable is {max_achievable}")]
    InfeasibleRatio { requested: f64, max_achievable: f64 },

    #[error("plan does not match model: {0}")]
    PlanMismatch(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("corpus has {len} tokens, need at least {need}")]
    CorpusTooShort { len: usize, need: usize },

    #[error("result kind mismatch: expected {expected}, got {found}")]
    KindMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("model perplexity {ppl} does not beat the uniform baseline {baseline}")]
    Untrained { ppl: f64, baseline: f64 },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short identifier used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::InvalidTensor { .. } => "shape",
            Error::NonFinite(_) => "numeric",
            Error::Config(_) => "config",
            Error::TokenOutOfRange { .. } | Error::SequenceTooLong { .. } => "input",
            Error::IndexOutOfRange { .. } => "index",
            Error::InvalidArgument(_) => "argument",
            Error::EmptyCalibration | Error::BadSample { .. } => "calibration",
            Error::InfeasibleRatio { .. } => "infeasible",
            Error::PlanMismatch(_) => "plan_mismatch",
            Error::Diverged { .. } => "diverged",
            Error::CorpusTooShort { .. } => "corpus_too_short",
            Error::KindMismatch { .. } => "kind_mismatch",
            Error::Untrained { .. } => "untrained",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
