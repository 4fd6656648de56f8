use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("line {line}: unknown class name {name:?}")]
    UnknownClass { name: String, line: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("split part {part:?} received zero images")]
    DegenerateSplit { part: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("id {id} out of range for {what} (size {size})")]
    InvalidId {
        what: &'static str,
        id: usize,
        size: usize,
    },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("non-finite input at position {0}")]
    NonFiniteInput(usize),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (max |grad| = {max_grad})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        max_grad: f64,
    },

    #[error("negative entry {value} at ({row}, {col})")]
    NegativeEntry { row: usize, col: usize, value: f64 },

    #[error("invalid alpha {0}: must be finite and >= 0")]
    InvalidAlpha(f64),

    #[error("invalid logarithm base {0}: must be > 1")]
    InvalidBase(f64),

    #[error("invalid M = {m}: need 1 <= M < K = {k}")]
    InvalidM { m: usize, k: usize },

    #[error("confidence undersampling requires a pretrained model")]
    MissingModel,

    #[error("domain spec is empty or does not cover the predicate vocabulary")]
    EmptySpec,

    #[error("image has no gold triplets")]
    NoGold,

    #[error("image {0} has no object pairs to rank")]
    EmptyImage(u64),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("unknown ablation {0:?}")]
    UnknownAblation(String),

    #[error("oracle information missing: {0}")]
    MissingOracle(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidDims(_)
            | Error::InvalidAlpha(_)
            | Error::InvalidBase(_)
            | Error::InvalidM { .. }
            | Error::UnknownAblation(_)
            | Error::MissingModel
            | Error::EmptySpec => 2,
            Error::NonFiniteLoss { .. } | Error::NonFiniteInput(_) => 4,
            _ => 3,
        }
    }
}
