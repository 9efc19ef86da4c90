use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e}); raise epsilon")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("no history: the task summary has no registered classes")]
    NoHistory,

    #[error("empty score buffer")]
    EmptyBuffer,

    #[error("quantile {0} outside the open interval (0, 1)")]
    QuantileRange(f64),

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,

    #[error(
        "orthogonal complement exhausted: {requested} new keys requested with {existing} \
         existing in dimension {dim}; increase the feature dimension or lower prompts per task"
    )]
    OrthogonalExhausted {
        requested: usize,
        existing: usize,
        dim: usize,
    },

    #[error("unknown expert id {0}")]
    UnknownExpert(usize),

    #[error("no experts older than task {0} to route in-distribution samples to")]
    NoPriorExperts(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },

    #[error("unknown class {0}")]
    UnknownClass(u32),

    #[error("forgetting undefined for a single task")]
    ForgettingUndefined,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("not an embedding file")]
    BadMagic,

    #[error("truncated embedding file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("embedding file has zero {0}")]
    ZeroSize(&'static str),

    #[error("malformed split manifest at line {line}: {msg}")]
    SplitManifest { line: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}
