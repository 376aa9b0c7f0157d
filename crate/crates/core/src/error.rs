use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("stream too short: {0}")]
    TooShort(String),
    #[error("filter design error: {0}")]
    FilterDesign(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value in layer {layer}: {what}")]
    Numeric { layer: usize, what: String },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate probe: {0}")]
    DegenerateProbe(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("pipeline consistency error: {0}")]
    Consistency(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
