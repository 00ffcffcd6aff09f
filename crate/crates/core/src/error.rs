use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed arguments that violate an operation's contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// A required input (cell data, catalog entry) was not supplied.
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// A raw file could not be ingested.
    #[error("{}:{line}: {msg}", path.display())]
    Ingest {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    /// A structured input (schema, workload, report) failed to parse.
    #[error("format error: {0}")]
    Format(String),

    #[error("workload generation failed: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// I/O failure on `path`, keeping the error kind.
    pub(crate) fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    /// Parse failure inside `path`.
    pub(crate) fn format_in(path: &Path, e: impl std::fmt::Display) -> Error {
        Error::Format(format!("{}: {e}", path.display()))
    }

    /// True for errors caused by how the API or CLI was invoked, as opposed
    /// to problems with the data it was pointed at.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_) | Error::Precondition(_))
    }
}
