use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("malformed {what}: {message}")]
    Parse { what: String, message: String },

    #[error("stage `{stage}` failed (artifact {path}): {source}")]
    Stage {
        stage: String,
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn backend(msg: impl Into<String>) -> Self {
        Error::Backend(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub fn parse(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            message: message.to_string(),
        }
    }

    /// Process exit code for the command-line tool: 1 usage, 2 backend, 3 integrity.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Backend(_) => 2,
            Error::Format { .. } | Error::Invariant(_) | Error::Integrity(_) => 3,
            Error::Stage { source, .. } => source.exit_code(),
            Error::Io { .. }
            | Error::EmptyInput(_)
            | Error::Usage(_)
            | Error::Degenerate(_)
            | Error::Mode(_)
            | Error::Parse { .. } => 1,
        }
    }
}
