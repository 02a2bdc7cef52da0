use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the mapping engine and its I/O surfaces.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("mask selects no valid pixels")]
    EmptyMask,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: usize, message: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid scene script: {0}")]
    Script(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
