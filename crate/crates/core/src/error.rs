use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Non-finite state or command handed to the axis model.
    #[error("model domain error: {0}")]
    Model(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("insufficient history: need {needed} samples to span one damped period, got {got}")]
    InsufficientHistory { needed: usize, got: usize },

    #[error("shaper error: {0}")]
    Shaper(String),

    #[error("environment protocol error: {0}")]
    Protocol(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at {node}")]
    NonFinite { node: String },

    #[error("non-finite loss, update aborted ({0})")]
    NonFiniteLoss(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("infeasible move: {0}")]
    InfeasibleMove(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short category tag used in CLI messages.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Model(_) | Error::InvalidParams(_) | Error::InsufficientHistory { .. } => "model",
            Error::Shaper(_) | Error::InfeasibleMove(_) => "shaper",
            Error::Protocol(_) => "protocol",
            Error::Shape(_) | Error::NonFinite { .. } | Error::NonFiniteLoss(_) => "numeric",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Checkpoint(_) | Error::ArchitectureMismatch(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "io" => 3,
            "parse" => 4,
            "checkpoint" => 5,
            "numeric" => 6,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
