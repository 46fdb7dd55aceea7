use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands disagree on shape. Both shapes are rendered as `CxHxW`.
    #[error("{op}: shape mismatch, {expected} vs {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file was readable but its contents are not what the format demands.
    #[error("{path}: malformed {format} data: {reason}")]
    Format {
        path: PathBuf,
        format: &'static str,
        reason: String,
    },

    #[error("weight store: bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("weight store: unsupported version {0}")]
    VersionMismatch(u32),

    #[error("weight store: truncated while reading {0}")]
    Truncated(String),

    #[error("weight store: duplicate tensor {0}")]
    DuplicateLayer(String),

    #[error("weight store: missing required tensor {0}")]
    MissingLayer(String),

    #[error("weight store: unexpected tensor {0}")]
    UnexpectedLayer(String),

    #[error("weight store: tensor {name} has shape {found:?}, expected {expected:?}")]
    LayerShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed or unreadable files rather than
    /// by incompatible (but well-formed) inputs.
    pub fn is_file_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Format { .. }
                | Error::BadMagic(_)
                | Error::VersionMismatch(_)
                | Error::Truncated(_)
                | Error::DuplicateLayer(_)
        )
    }
}
