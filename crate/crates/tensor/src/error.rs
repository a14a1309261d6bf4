use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("softmax row {row} has every position masked")]
    AllMasked { row: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("gradient buffer count {got} does not match parameter count {expected}")]
    GradientCount { expected: usize, got: usize },
}

impl TensorError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;
