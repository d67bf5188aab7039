use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Error, Debug)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    /// Malformed input file; `line` is 1-based.
    #[error("{message}, line {line}")]
    Parse { line: usize, message: String },

    /// A domain invariant does not hold for the given input.
    #[error("{0}")]
    Invalid(String),

    #[error("no cells to score")]
    NoCells,

    #[error("tile {path}: {message}")]
    Tile { path: PathBuf, message: String },

    #[error("detector failed on tile {tile} ({completed} of {total} tiles completed): {message}")]
    Detector {
        tile: usize,
        completed: usize,
        total: usize,
        message: String,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: msg.into(),
        }
    }
}
