use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {context}: {message}")]
    Json { context: String, message: String },
    #[error("{file}:{line}: value {value} is not in alphabet {alphabet:?}")]
    AlphabetViolation {
        file: String,
        line: usize,
        value: i64,
        alphabet: Vec<i8>,
    },
    #[error("{context}: expected length {expected}, found {found}")]
    LengthMismatch {
        context: String,
        expected: usize,
        found: usize,
    },
    #[error("{0}: ensemble has no snapshots")]
    EmptyEnsemble(String),
    #[error("duplicate point id {0}")]
    DuplicateId(usize),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("eigensolver did not converge: {0}")]
    NoConvergence(String),
    #[error("training diverged at epoch {epoch}: {message}")]
    Divergent { epoch: usize, message: String },
    #[error("temperature bracketing failed; loss profile {profile:?}")]
    Bracketing { profile: Vec<(f64, f64)> },
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("missing artifacts: {0:?}")]
    MissingArtifacts(Vec<String>),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, err: impl std::fmt::Display) -> Self {
        Error::Json {
            context: context.into(),
            message: err.to_string(),
        }
    }
}
