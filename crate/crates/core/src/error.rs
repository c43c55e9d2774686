use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("malformed record at line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("missing image file {}", path.display())]
    MissingImage { path: PathBuf },

    #[error("training fault: {0}")]
    TrainingFault(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// True for faults caused by non-finite numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::TrainingFault(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
