use std::path::PathBuf;

/// Errors produced by the workbench.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("bundle error at {path}: {message}")]
    Bundle { path: PathBuf, message: String },

    #[error("validation failed for tensor `{tensor}`: {message}")]
    Validation { tensor: String, message: String },

    #[error("token error: {0}")]
    Token(String),

    #[error("input of {len} tokens exceeds the context window of {max}")]
    Length { len: usize, max: usize },

    #[error("invalid component: {0}")]
    Component(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn bundle(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Bundle {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn validation(tensor: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            tensor: tensor.into(),
            message: message.into(),
        }
    }
}
