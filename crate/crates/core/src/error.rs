//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A dataset row failed to parse. Carries the 1-based row number and the
    /// offending field so the bad input can be located directly.
    #[error("row {row}: invalid field `{field}`: {message}")]
    MalformedRow {
        row: usize,
        field: String,
        message: String,
    },

    #[error("unknown dataset format `{0}` (expected `csv` or `jsonl`)")]
    UnknownFormat(String),

    #[error("unknown column `{0}` in dataset header")]
    UnknownColumn(String),

    #[error("missing column `{0}` in dataset header")]
    MissingColumn(String),

    #[error("empty label set: every group fell below the exclusion threshold {threshold}")]
    EmptyLabelSet { threshold: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("class {class} has {count} members, fewer than k={k}")]
    ClassTooSmall { class: usize, count: usize, k: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("record has no history or diagnosis words: not augmentable")]
    NotAugmentable,

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("artifact lineage mismatch: {0}")]
    LineageMismatch(String),

    #[error("missing upstream artifact: {path} (run `{stage}` first)")]
    MissingArtifact { path: String, stage: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op: op.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
