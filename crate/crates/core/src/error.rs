use thiserror::Error;

pub type Result<T> = std::result::Result<T, HrcbError>;

#[derive(Debug, Error)]
pub enum HrcbError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("space mismatch: {0} vs {1}")]
    SpaceMismatch(String, String),

    #[error("point is not on the manifold: {0}")]
    NotOnManifold(String),

    #[error("vector is not tangent at the base point (residual {0:e})")]
    NotTangent(f64),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid hierarchy: {0}")]
    InvalidHierarchy(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("missing embedding for node {0}")]
    MissingEmbedding(usize),

    #[error("training failed: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HrcbError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        HrcbError::InvalidParameter(msg.into())
    }
}
