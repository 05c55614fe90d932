use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or input value failed validation.
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },

    /// Tensor/frame shapes do not line up.
    #[error("geometry mismatch: {0}")]
    Geometry(String),

    /// A cluster centroid collapsed to (near) zero norm.
    #[error("degenerate centroid for cluster {cluster}: mean norm {norm:.3e}")]
    DegenerateCentroid { cluster: usize, norm: f64 },

    /// Gradients or parameters contain NaN/Inf; the update was rejected.
    #[error("non-finite values in {0}; update rejected")]
    NonFinite(&'static str),

    /// Evaluation protocol violation.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Config file parse error with a line number.
    #[error("config error at line {line}: {reason}")]
    Config { line: usize, reason: String },

    /// A required prior-stage checkpoint is missing.
    #[error("missing checkpoint for stage `{0}`")]
    MissingCheckpoint(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid { field, reason: reason.into() }
    }
}
