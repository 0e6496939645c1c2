use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("record {id}: {message}")]
    Validation { id: String, message: String },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("provider {provider}: {message}")]
    Provider { provider: String, message: String },

    #[error("mock miss: no scripted response for {0}")]
    MockMiss(String),

    #[error("output rejected after {attempts} attempt(s); last response: {last_raw:?}")]
    FormatFailure { attempts: usize, last_raw: String },

    #[error("unparseable verdict for segment {id}: {reply:?}")]
    Verdict { id: String, reply: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("embedding is a zero vector")]
    ZeroVector,

    #[error("support index: {0}")]
    Index(String),

    #[error("response cache {path}: {message}")]
    Cache { path: PathBuf, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("prediction for unknown segment {0:?}")]
    UnknownSegment(String),

    #[error("template {name}: {message}")]
    Template { name: String, message: String },

    #[error("stage {stage} artifact was written under config hash {found}, current config hash is {expected}")]
    ResumeMismatch {
        stage: String,
        expected: String,
        found: String,
    },

    #[error("stage {stage} failed on segment(s) {}: {source}", ids.join(", "))]
    Stage {
        stage: String,
        ids: Vec<String>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.to_string(),
        }
    }

    pub(crate) fn validation(id: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            id: id.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 input, 4 provider,
    /// 5 verification, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Template { .. } | Error::ResumeMismatch { .. } => 2,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Validation { .. }
            | Error::DuplicateId(_)
            | Error::UnknownSegment(_)
            | Error::Index(_)
            | Error::Dimension { .. }
            | Error::ZeroVector => 3,
            Error::Provider { .. } | Error::MockMiss(_) | Error::Cache { .. } => 4,
            Error::FormatFailure { .. } | Error::Verdict { .. } => 5,
            Error::Contract(_) => 1,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}
