use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, KmtrError>;

#[derive(Debug, Error)]
pub enum KmtrError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("axis {axis} of length {len} is not divisible by patch extent {patch}")]
    NotDivisible {
        axis: &'static str,
        len: usize,
        patch: usize,
    },

    #[error("phantom geometry exceeds the field of view after {retries} resamples")]
    GeometryOverflow { retries: usize },

    #[error("missing threshold `{0}`")]
    MissingThreshold(String),

    #[error("missing phantom parameter `{0}`")]
    MissingParameter(String),

    #[error("non-positive semi-axis ({0})")]
    NonPositiveAxis(f64),

    #[error("contrastive batch needs at least 2 subjects, got {0}")]
    BatchTooSmall(usize),

    #[error("embedding row {0} has zero norm")]
    ZeroNorm(usize),

    #[error("visible and hidden token sets overlap at index {0}")]
    PartitionOverlap(usize),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("split contamination: subject `{0}` appears in more than one split")]
    SplitContamination(String),

    #[error("domain violation: {0}")]
    DomainViolation(String),

    #[error("task mismatch: {0}")]
    TaskMismatch(String),

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("experiment directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("array format: {0}")]
    Format(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl KmtrError {
    pub(crate) fn shape(context: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        KmtrError::ShapeMismatch {
            context,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
