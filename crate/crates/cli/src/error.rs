use std::path::PathBuf;

use thiserror::Error;
use uatta_core::Error as CoreError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot parse config {path:?}: {message}")]
    ConfigParse { path: PathBuf, message: String },
    #[error("adaptation needs embeddings; a score matrix alone cannot be calibrated (use --baseline none)")]
    ExternalScoresCannotAdapt,
    #[error("I/O failure on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 usage or config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::ConfigParse { .. } | CliError::ExternalScoresCannotAdapt => 1,
            CliError::Io { .. } => 2,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(CoreError::InvalidConfig(_) | CoreError::KOutOfRange { .. }) => 1,
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
