use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-range configuration.
    #[error("{0}")]
    Config(String),

    /// Corpus, checkpoint or evaluation input that violates a contract.
    #[error("{0}")]
    Data(String),

    /// Shape or index misuse at an API boundary.
    #[error("{0}")]
    Invalid(String),

    /// A loss became non-finite during training.
    #[error("non-finite loss in phase {phase} at step {step}")]
    NonFinite { phase: &'static str, step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parseable class used by the command-line front end.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data(_) | Error::Io { .. } | Error::Image { .. } => "data",
            Error::Invalid(_) => "invalid",
            Error::NonFinite { .. } => "numeric",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io { .. } | Error::Image { .. } | Error::Invalid(_) => 3,
            Error::NonFinite { .. } => 4,
        }
    }
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
