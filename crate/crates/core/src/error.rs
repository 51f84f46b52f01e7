use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input sizes do not satisfy an operation's precondition.
    #[error("size error: {0}")]
    Size(String),
    /// A value lies outside an operation's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// Invalid or inconsistent configuration; the message names the field path.
    #[error("configuration error: {0}")]
    Config(String),
    /// A non-finite value appeared during evaluation or differentiation.
    #[error("numeric error at {node}: {detail}")]
    Numeric { node: String, detail: String },
    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step} ({stage})")]
    NonFiniteLoss { step: usize, stage: String },
    /// Malformed persisted data.
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
    /// Persisted data carries an unexpected format header or version.
    #[error("format header mismatch: {0}")]
    Header(String),
    /// Artifact produced under a different configuration.
    #[error("config digest mismatch: expected {expected}, found {found}")]
    Digest { expected: String, found: String },
    /// A verification check failed.
    #[error("check failed: {0}")]
    Check(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Check(_) => 1,
            Error::Io { .. } => 3,
            _ => 2,
        }
    }
}
