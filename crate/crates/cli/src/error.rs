use std::path::PathBuf;

use bitstain_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// 1 for usage and configuration problems, 2 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::MissingInput(_) | CliError::Config(_) => 1,
            CliError::Core(CoreError::Config(_) | CoreError::Parameter(_)) => 1,
            CliError::Io { .. } | CliError::Core(_) => 2,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
