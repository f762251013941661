use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed file contents. `offset` is the byte position where decoding failed.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// Well-formed input whose values violate a domain invariant.
    #[error("data error: {0}")]
    Data(String),

    /// Caller passed arguments that violate an operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),

    /// The request exceeds a hard resource limit (e.g. the exact CRF pixel cap).
    #[error("resource error: {0}")]
    Resource(String),

    /// A metric has no defined value for the given counts.
    #[error("undefined result: {0}")]
    Undefined(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("record {id}: {source}")]
    Record {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn in_record(self, id: impl Into<String>) -> Self {
        Error::Record {
            id: id.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with file and record context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::File { source, .. } | Error::Record { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for errors caused by bad arguments or unreadable inputs, as opposed
    /// to per-record processing failures.
    pub fn is_usage_or_format(&self) -> bool {
        matches!(self.root(), Error::Usage(_) | Error::Format { .. })
    }
}
