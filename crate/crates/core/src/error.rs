use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A spec or config violates one of its invariants.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    /// A numeric argument lies outside its admissible range.
    #[error("invalid value: {0}")]
    Value(String),

    /// Dataset content is unusable (empty split, wrong raw shape, unknown class, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A file exists but cannot be decoded.
    #[error("corrupt or unreadable {what} at {path}: {reason}")]
    Format {
        what: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("training failed: {0}")]
    Training(String),

    /// Error raised inside one run of an experiment matrix.
    #[error("run {model_id}: {source}")]
    Run {
        model_id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn format(
        what: &'static str,
        path: impl Into<PathBuf>,
        reason: impl ToString,
    ) -> Self {
        Error::Format {
            what,
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// Innermost error, looking through `Run` annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Run { source, .. } => source.root(),
            other => other,
        }
    }
}
