use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("degenerate vector: {0}")]
    DegenerateVector(&'static str),

    #[error("cannot split {classes} classes into {tasks} tasks")]
    Split { classes: usize, tasks: usize },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("empty feature group for class {0}")]
    EmptyGroup(u32),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("no candidate prototypes to match against")]
    EmptyBank,

    #[error("malformed data: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
