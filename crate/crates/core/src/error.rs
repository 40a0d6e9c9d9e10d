use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the framework.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("ingestion error in {path}: {}", format_lines(.lines))]
    Ingestion { path: PathBuf, lines: Vec<(usize, String)> },

    #[error("data error: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A training run stopped early. `report` is the partial run report as
    /// JSON.
    #[error("training aborted: {cause}")]
    Aborted { cause: Box<Error>, report: String },
}

fn format_lines(lines: &[(usize, String)]) -> String {
    lines
        .iter()
        .map(|(n, msg)| format!("line {n}: {msg}"))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Aborted { cause, .. } => cause.exit_code(),
            Error::Config(_) | Error::Compatibility(_) => 2,
            Error::NonFinite(_) => 4,
            Error::Shape(_)
            | Error::State(_)
            | Error::Input(_)
            | Error::Ingestion { .. }
            | Error::Data(_)
            | Error::Io { .. }
            | Error::Json(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
