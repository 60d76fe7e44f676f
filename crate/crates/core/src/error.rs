use std::path::PathBuf;

use thiserror::Error;

use crate::catalog::Division;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("line {line}: field `{field}` {problem}")]
    InvalidEmbedding {
        line: usize,
        field: &'static str,
        problem: String,
    },

    #[error("duplicate product_id `{0}`")]
    DuplicateProduct(String),

    #[error("unknown division `{0}`")]
    UnknownDivision(String),

    #[error("unknown product `{0}`")]
    UnknownProduct(String),

    #[error("unknown outfit `{0}`")]
    UnknownOutfit(String),

    #[error("outfit `{outfit_id}`: duplicate division {division}")]
    DuplicateDivision { outfit_id: String, division: Division },

    #[error("outfit `{outfit_id}`: {message}")]
    InvalidOutfit { outfit_id: String, message: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corrupt data at byte offset {offset}: {message}")]
    Corrupt { offset: u64, message: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("no compatibility model for pairing {0}")]
    MissingModel(String),

    #[error("no candidates available for {0}")]
    EmptyPool(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
