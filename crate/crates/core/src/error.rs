use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,

    #[error("corpus has no entries")]
    EmptyCorpus,

    #[error("batch too small: got {got}, need at least {min}")]
    BatchTooSmall { got: usize, min: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("gate mode {mode} requires a policy action")]
    MissingPolicyAction { mode: String },

    #[error("empty batch")]
    EmptyBatch,

    #[error("missing rating: a NO_FETCH reward requires an evaluator rating")]
    MissingRating,

    #[error("unexpected rating: a FETCH reward takes no evaluator rating")]
    UnexpectedRating,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad inputs or configuration rather than a
    /// failure at runtime. The CLI maps these to exit code 2, the rest to 3.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
