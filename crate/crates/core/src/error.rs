use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no samples for bandwidth")]
    NoSamplesForBandwidth,

    #[error("invalid kernel spec: {0}")]
    InvalidKernel(String),

    #[error("dimension mismatch: {what} ({left} vs {right})")]
    DimensionMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("empty domain in MMD")]
    EmptyDomain,

    #[error("empty class pair ({c1}, {c2})")]
    EmptyClassPair { c1: usize, c2: usize },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("uncovered class {0}")]
    UncoveredClass(usize),

    #[error("CAS precondition violated: class {class} has no {domain} samples")]
    CasPrecondition { class: usize, domain: &'static str },

    #[error("empty source set")]
    EmptySource,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("divergence: non-finite {0}")]
    Divergence(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("dataset is unlabeled")]
    Unlabeled,

    #[error("no samples")]
    NoSamples,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
