use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] fracsrf::Error),

    #[error("gradient check failed: max relative error {max:e} is not below {tolerance:e}")]
    GradcheckFailed { max: f64, tolerance: f64 },
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    /// 1 for bad flags or files, 2 for numerical or engine failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io { .. } => 1,
            CliError::Core(e) if e.is_internal() => 2,
            CliError::Core(_) => 1,
            CliError::GradcheckFailed { .. } => 2,
        }
    }
}
