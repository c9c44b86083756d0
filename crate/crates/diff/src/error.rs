use thiserror::Error;

pub type Result<T> = std::result::Result<T, DiffError>;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {layer}: {detail}")]
    Shape { layer: String, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error("backward called without a recorded forward pass: {0}")]
    NoGraph(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("tensor file {path}: {detail}")]
    Format { path: String, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
}

impl DiffError {
    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        DiffError::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DiffError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
