use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is too small to normalize")]
    ZeroVector { norm: f64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("backward called without a matching forward pass")]
    NoCache,

    #[error("function is not finite at coordinate {coordinate}")]
    NonFiniteFunction { coordinate: usize },

    #[error("dictionary capacity must be at least 1")]
    ZeroCapacity,

    #[error("feature norm {norm} deviates from 1 by more than 1e-6")]
    UnnormalizedFeature { norm: f64 },

    #[error("input vector has norm {norm}, expected a unit vector")]
    UnnormalizedInput { norm: f64 },

    #[error("batch contains no subgroups")]
    EmptyBatch,

    #[error("true class {class} is not in the selection pool")]
    TrueClassNotSelected { class: usize },

    #[error("gallery size {gallery_size} cannot hold {probes} probe matches")]
    GallerySizeTooSmall { gallery_size: usize, probes: usize },

    #[error("query {query} has no relevant gallery item")]
    NoRelevantItem { query: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value at iteration {iteration}: {what}")]
    NonFinite { iteration: u64, what: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
