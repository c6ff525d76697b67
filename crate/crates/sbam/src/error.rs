use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors shared by the library and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible array dimensions; names both offending shapes.
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// A scalar argument outside its documented domain.
    #[error("invalid {name}: {message}")]
    Parameter { name: &'static str, message: String },

    /// An inconsistent or unparsable run configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// The masked-reconstruction loss is undefined when nothing is masked.
    #[error("loss undefined: mask selects no tokens")]
    EmptyMask,

    /// All performances in a sweep are equal, so normalization is undefined.
    #[error("degenerate sweep: {0}")]
    DegenerateSweep(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    /// A file exists but is not in the expected format.
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: impl Into<String>, rhs: impl Into<String>) -> Self {
        Error::Shape {
            op,
            lhs: lhs.into(),
            rhs: rhs.into(),
        }
    }

    pub(crate) fn parameter(name: &'static str, message: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
