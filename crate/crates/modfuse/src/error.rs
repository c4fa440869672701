use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    /// A malformed line in a text file. Lines are 1-based.
    #[error("{origin}:{line}: field `{field}`: {message}")]
    Parse {
        origin: String,
        line: usize,
        field: String,
        message: String,
    },
    /// A structurally invalid binary or text file.
    #[error("{origin}: {message}")]
    Format { origin: String, message: String },
    #[error(transparent)]
    Core(#[from] modfuse_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn parse(
        origin: &str,
        line: usize,
        field: &str,
        message: impl Into<String>,
    ) -> Self {
        Error::Parse {
            origin: origin.to_string(),
            line,
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn format(origin: &str, message: impl Into<String>) -> Self {
        Error::Format {
            origin: origin.to_string(),
            message: message.into(),
        }
    }

    /// Rewrites the origin of a parse or format error to `path`.
    pub(crate) fn at(self, path: &Path) -> Self {
        let origin = path.display().to_string();
        match self {
            Error::Parse {
                line,
                field,
                message,
                ..
            } => Error::Parse {
                origin,
                line,
                field,
                message,
            },
            Error::Format { message, .. } => Error::Format { origin, message },
            Error::Io { source, .. } => Error::Io {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        }
    }
}
