use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::Checkpoint;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("degenerate image: {height}x{width}")]
    DegenerateImage { height: usize, width: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        last_good: Option<Box<Checkpoint>>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
