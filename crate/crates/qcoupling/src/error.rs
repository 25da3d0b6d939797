use std::path::PathBuf;

use qcoupling_core::Error as CoreError;

/// Exit code: every check passed.
pub const EXIT_OK: i32 = 0;
/// Exit code: a mathematical check failed.
pub const EXIT_CHECK_FAILED: i32 = 1;
/// Exit code: invalid input, configuration or output location.
pub const EXIT_INVALID_INPUT: i32 = 2;
/// Exit code: a resource guard was exceeded.
pub const EXIT_GUARD: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),

    /// Malformed or invalid file contents, with a line or field locator.
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },

    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Self::Format { path: path.into(), msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Core(e) if e.is_guard() => EXIT_GUARD,
            Self::Core(CoreError::MixingCapExceeded { .. } | CoreError::ThresholdNotResolved { .. }) => EXIT_CHECK_FAILED,
            _ => EXIT_INVALID_INPUT,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
