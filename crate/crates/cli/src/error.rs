use std::path::PathBuf;

use msct_core::ErrorClass;
use msct_neural::NeuralError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    /// A prerequisite file of a command is absent.
    #[error("{what}: {}", path.display())]
    Missing { what: String, path: PathBuf },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest {}: {message}", path.display())]
    Manifest { path: PathBuf, message: String },

    #[error("core: {0}")]
    Core(#[from] msct_core::Error),

    #[error("neural: {0}")]
    Neural(#[from] NeuralError),
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn missing(what: &str, path: impl Into<PathBuf>) -> Self {
        CliError::Missing {
            what: what.to_string(),
            path: path.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            CliError::Config(_) => ErrorClass::Config,
            CliError::Core(e) => e.class(),
            CliError::Neural(e) => e.class(),
            _ => ErrorClass::Data,
        }
    }

    /// 2 for configuration errors, 3 for data errors, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
