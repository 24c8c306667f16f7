use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("requested {requested} modes but the data only supports {rank} (singular value floor {floor:.3e})")]
    RankDeficient {
        requested: usize,
        rank: usize,
        floor: f64,
    },

    #[error("voxel {0} is masked in every image")]
    AllMasked(usize),

    #[error("iterate became non-finite at iteration {0}")]
    NonFinite(usize),

    #[error("SVD did not converge")]
    SvdFailure,

    #[error("invalid phantom spec: {0}")]
    SpecInvalid(String),

    #[error("external command failed: {0}")]
    ProcessFailure(String),

    #[error("cannot parse {path}: {reason}")]
    ParseFailure { path: PathBuf, reason: String },

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wraps the error with a short description of where it happened.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping context layers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config { .. } => 2,
            Error::NonFinite(_) | Error::SvdFailure | Error::RankDeficient { .. } => 4,
            Error::ProcessFailure(_) => 5,
            _ => 3,
        }
    }
}

pub(crate) fn parse_failure(path: impl Into<PathBuf>, reason: impl Into<String>) -> Error {
    Error::ParseFailure {
        path: path.into(),
        reason: reason.into(),
    }
}
