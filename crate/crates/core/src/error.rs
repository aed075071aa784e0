use std::path::PathBuf;

use thiserror::Error;

/// Broad failure classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Invalid parameters or configuration.
    Config,
    /// Malformed or inconsistent input data.
    Data,
    /// A computation produced something non-finite or left its domain.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{0}: non-monotone energy grid")]
    NonMonotoneEnergy(String),

    #[error("{name}: non-positive attenuation {value} at {energy_kev} keV")]
    NonPositiveAttenuation {
        name: String,
        energy_kev: f64,
        value: f64,
    },

    #[error("{name}: energy {energy_kev} keV outside tabulated range [{min_kev}, {max_kev}] keV")]
    EnergyOutOfRange {
        name: String,
        energy_kev: f64,
        min_kev: f64,
        max_kev: f64,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("flat field of row {row} is {value} DN, too small to normalize")]
    FlatFieldTooSmall { row: usize, value: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidParameter(_) => ErrorClass::Config,
            Error::Numeric(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
