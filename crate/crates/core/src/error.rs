use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("column {0:?} has no cells")]
    EmptyColumn(String),
    #[error("duplicate column id {0:?}")]
    DuplicateId(String),
    #[error("unknown column id {0:?}")]
    UnknownId(String),
    #[error("table parse error: {0}")]
    Parse(String),
    #[error("column index {index} out of bounds for a table with {width} columns")]
    ColumnOutOfBounds { index: usize, width: usize },
    #[error("bad file format: {0}")]
    Format(String),
    #[error("unsupported file version: {0}")]
    Version(String),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("incompatible sketches: {0}")]
    IncompatibleSketch(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("embedder transport error: {0}")]
    Transport(String),
    #[error("embedder protocol error: {0}")]
    Protocol(String),
    #[error("embedder reported an error for {id:?}: {msg}")]
    Remote { id: Option<String>, msg: String },
    #[error("embedder response is missing id {0:?}")]
    MissingId(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
