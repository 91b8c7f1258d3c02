use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, dimensions or parameter values that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// The instance map would be left in an inconsistent state.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("could not place object after {retries} retries")]
    Capacity { retries: usize },

    #[error("parse error in {}: byte offset {offset}: {message}", path.display())]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("sequence gap: frame {index} is missing")]
    Gap { index: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }

    /// True for errors caused by bad inputs or settings rather than runtime failures.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Precondition(_) => true,
            Error::Frame { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
