use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] krr_precond::Error),
}

impl BenchError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// 1 for configuration, input and I/O problems, 3 for numerical breakdown.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Core(krr_precond::Error::Numerical(_) | krr_precond::Error::Breakdown { .. }) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;

pub(crate) fn config_error(msg: impl Into<String>) -> BenchError {
    BenchError::Config(msg.into())
}
