use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    TrainingFailure {
        epoch: usize,
        reason: String,
        /// Path of the most recent checkpoint written before the failure, if any.
        last_checkpoint: Option<PathBuf>,
    },

    #[error("missing pair: {0}")]
    MissingPair(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("version error: {0}")]
    Version(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// Short machine-readable kind, used by the command-line error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::InvalidState(_) => "invalid-state",
            Error::NumericFailure(_) => "numeric-failure",
            Error::TrainingFailure { .. } => "training-failure",
            Error::MissingPair(_) => "missing-pair",
            Error::Parse(_) => "parse",
            Error::Pairing(_) => "pairing",
            Error::Version(_) => "version",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Serde(_) => "serde",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
