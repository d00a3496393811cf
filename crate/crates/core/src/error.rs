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

    #[error("manifest {path}: field `{field}`: {message}")]
    Manifest {
        path: PathBuf,
        field: String,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid pattern `{pattern}`: {message}")]
    Pattern { pattern: String, message: String },

    #[error("panel required")]
    PanelRequired,

    #[error("fixer `{fixer}` unavailable: {message}")]
    FixerUnavailable { fixer: String, message: String },

    #[error("empty candidate")]
    EmptyCandidate,

    #[error("timing measurement failed: {0}")]
    Measurement(String),

    #[error("ranking mismatch: {0}")]
    RankingMismatch(String),

    #[error("{0}")]
    Invalid(String),

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Configuration problems map to CLI exit status 2, everything else to 1.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Pattern { .. } | Error::PanelRequired
        )
    }
}
