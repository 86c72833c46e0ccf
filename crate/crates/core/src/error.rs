use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient produced by backward of {op}")]
    NonFiniteGradient { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("batch norm in train mode needs more than one value per channel")]
    DegenerateBatch,

    #[error("invalid config: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("{0}")]
    Invalid(String),

    #[error("dataset {name:?} is empty")]
    EmptyDataset { name: String },

    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),

    #[error("labels.csv row {row}: image file {file:?} not found")]
    MissingFile { row: usize, file: PathBuf },

    #[error("labels.csv row {row}: bad label {value:?}")]
    BadLabel { row: usize, value: String },

    #[error("labels.csv row {row}: cannot read image {file:?}: {reason}")]
    UnreadableImage {
        row: usize,
        file: PathBuf,
        reason: String,
    },

    #[error("image format: {0}")]
    ImageFormat(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("class space mismatch: classifier has {expected} classes, dataset label {found}")]
    ClassSpace { expected: usize, found: usize },

    #[error("missing provenance: {0}")]
    MissingProvenance(String),

    #[error("insufficient samples: need {needed}, {name:?} has {available}")]
    InsufficientSamples {
        name: String,
        needed: usize,
        available: usize,
    },

    #[error("embedding has no points tagged {0}")]
    MissingTag(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
