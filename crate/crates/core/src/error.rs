use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the model, the samplers and the file formats.
///
/// Variants are grouped by category so that front ends can map them onto
/// distinct exit codes (see [`Error::category`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("degenerate one-step forecast at t={t}: scale {q:e} is below the numerical floor")]
    DegenerateForecast { t: usize, q: f64 },

    #[error("filter failed at t={t}: {source}")]
    FilterStep {
        t: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: format error: {message}")]
    Format { path: PathBuf, message: String },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("incompatible metadata: {0}")]
    Metadata(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported combination: {0}")]
    Unsupported(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error class, stable across releases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    InvalidInput,
    Numerical,
    Format,
    Metadata,
    Io,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Parameter(_) | Error::Data(_) | Error::Config(_) | Error::Unsupported(_) => {
                ErrorCategory::InvalidInput
            }
            Error::DegenerateForecast { .. } | Error::Numerical(_) => ErrorCategory::Numerical,
            Error::FilterStep { source, .. } => source.category(),
            Error::Format { .. } | Error::Integrity(_) => ErrorCategory::Format,
            Error::Metadata(_) => ErrorCategory::Metadata,
            Error::Io { .. } => ErrorCategory::Io,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
