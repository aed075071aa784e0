use std::path::PathBuf;

use msct_core::ErrorClass;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("{layer}: expected {expected}, got {actual}")]
    Shape {
        layer: String,
        expected: String,
        actual: String,
    },

    #[error("weights fingerprint {found:016x} does not match architecture {expected:016x}")]
    Fingerprint { expected: u64, found: u64 },

    #[error("missing parameter block {0}")]
    MissingParameter(String),

    #[error("non-finite loss at batch {batch} of epoch {epoch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] msct_core::Error),
}

impl NeuralError {
    pub fn class(&self) -> ErrorClass {
        match self {
            NeuralError::Config(_) => ErrorClass::Config,
            NeuralError::NonFiniteLoss { .. } => ErrorClass::Numeric,
            NeuralError::Core(e) => e.class(),
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn shape(layer: &str, expected: impl std::fmt::Display, actual: impl std::fmt::Debug) -> Self {
        NeuralError::Shape {
            layer: layer.to_string(),
            expected: expected.to_string(),
            actual: format!("{actual:?}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, NeuralError>;
