use std::path::PathBuf;

use bitstain_tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("phantom generation placed only {placed} of {requested} nuclei")]
    Generation { placed: usize, requested: usize },
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }
}
