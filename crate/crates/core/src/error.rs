use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, unsupported architecture, or a shape that does
    /// not fit the model.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller supplied data outside the operation's domain.
    #[error("input error: {0}")]
    Input(String),

    /// Inconsistency between internal buffers (shape mismatch in θ updates etc).
    #[error("internal error: {0}")]
    Internal(String),

    #[error("format error in {context} at byte offset {offset}: {reason}")]
    Format {
        context: String,
        offset: u64,
        reason: String,
    },

    #[error("no correctly classified candidates in {0} test samples")]
    EmptyCandidates(usize),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("config hash mismatch for {path}: expected {expected}, found {found}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }

    pub(crate) fn format(context: impl Into<String>, offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI.
    ///
    /// 0 success, 2 config error, 3 data-format error, 4 training diverged,
    /// 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::HashMismatch { .. } => 2,
            Error::Format { .. } => 3,
            Error::TrainingDiverged { .. } => 4,
            Error::Stage { source, .. } => source.exit_code(),
            Error::Input(_) | Error::Internal(_) | Error::EmptyCandidates(_) | Error::Io { .. } => 1,
        }
    }

    /// Strips any stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
