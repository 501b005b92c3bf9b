use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        row: usize,
    },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),

    #[error("backward called on a graph with no differentiable nodes")]
    EmptyGraph,

    #[error("non-finite value in {what} (first bad index {index})")]
    NonFinite { what: String, index: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error(
        "tokenizer fingerprint mismatch: vocabulary was built for {expected}, tokenizer is {found}"
    )]
    FingerprintMismatch { expected: String, found: String },

    #[error("{path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: u64, reason: String },

    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: u64, label: String },

    #[error("cannot build a tokenizer from an empty corpus")]
    EmptyCorpus,

    #[error("cannot draw {requested} examples from a population of {population}")]
    SubsampleTooLarge { requested: usize, population: usize },

    #[error("{0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptFile {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

/// Returns an error naming the first non-finite entry of `values`.
pub(crate) fn ensure_finite(what: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            what: what.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

pub(crate) fn ensure_all_finite(what: &str, groups: &[Vec<f64>]) -> Result<()> {
    let mut offset = 0;
    for g in groups {
        ensure_finite(what, g).map_err(|e| match e {
            Error::NonFinite { what, index } => Error::NonFinite {
                what,
                index: offset + index,
            },
            other => other,
        })?;
        offset += g.len();
    }
    Ok(())
}
