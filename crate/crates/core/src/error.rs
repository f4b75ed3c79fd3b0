use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller handed over data that violates an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value or rule file failed validation. Every violation is listed.
    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    /// The compiler (or rasterizer) binary could not be started at all.
    #[error("compiler unavailable: {0}")]
    CompilerUnavailable(String),

    /// Host-side failure (filesystem, sandbox setup) that says nothing about the sample.
    #[error("infrastructure error: {0}")]
    Infrastructure(String),

    /// Chat or embedding endpoint failure after retries were exhausted.
    #[error("transport error: {0}")]
    Transport(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    /// Short machine-readable tag, used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Config(_) => "config",
            Error::CompilerUnavailable(_) => "compiler_unavailable",
            Error::Infrastructure(_) => "infrastructure",
            Error::Transport(_) => "transport",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
