use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {message}")]
    Parse { context: String, message: String },
    #[error("layout '{layout}': {message}")]
    Layout { layout: String, message: String },
    #[error("non-finite value at frame {frame}, point '{point}' ({axis})")]
    NonFinite {
        frame: usize,
        point: String,
        axis: char,
    },
    #[error("{0}")]
    Shape(String),
    #[error("{0}")]
    Degenerate(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    InsufficientData(String),
    #[error("unsupported format_version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },
    #[error("zero-norm embedding at index {0}")]
    ZeroNorm(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    /// Stable machine-readable code, printed as the prefix of CLI errors.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::Parse { .. } => "E_PARSE",
            Error::Layout { .. } => "E_LAYOUT",
            Error::NonFinite { .. } => "E_NONFINITE",
            Error::Shape(_) => "E_SHAPE",
            Error::Degenerate(_) => "E_DEGENERATE",
            Error::Invalid(_) => "E_INVALID",
            Error::InsufficientData(_) => "E_DATA",
            Error::Version { .. } => "E_VERSION",
            Error::ZeroNorm(_) => "E_ZERONORM",
        }
    }
}
