use std::path::PathBuf;

use fnftg_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown configuration keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("synthetic generation: {0}")]
    Synthetic(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: u64, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CoreError {
    let path = path.into();
    move |source| CoreError::Io { path, source }
}
