use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("ill-conditioned covariance: {0}")]
    IllConditioned(String),

    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("parse error in {source_name} line {line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
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

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit code: 2 validation, 3 numeric failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Io { .. } => 4,
            Error::IllConditioned(_)
            | Error::InvalidCovariance(_)
            | Error::Numeric(_)
            | Error::SingularDesign(_)
            | Error::Domain(_) => 3,
            _ => 2,
        }
    }
}
