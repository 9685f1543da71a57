use std::io;
use std::path::{Path, PathBuf};

/// Errors raised while reading, writing or running the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] omcrd_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed file: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: integrity check failed: {message}")]
    Integrity { path: PathBuf, message: String },
    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    pub(crate) fn integrity(path: &Path, message: impl Into<String>) -> Self {
        Error::Integrity {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    /// Process exit status: 1 for usage and configuration problems, 2 for
    /// everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        use omcrd_core::Error as C;
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Core(C::Config(_) | C::ConfigMismatch(_) | C::Split(_) | C::SubjectLeakage { .. }) => 1,
            _ => 2,
        }
    }
}
