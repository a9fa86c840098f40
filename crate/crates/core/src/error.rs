use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("linear program is infeasible")]
    Infeasible,

    #[error("LP solver failure: {0}")]
    SolverFailure(String),

    /// The threshold leaves no strictly safe policy.
    #[error("no slack: threshold {threshold} is not below the maximal utility value {max_utility}")]
    NoSlack { threshold: f64, max_utility: f64 },

    #[error("unsupported environment: {0}")]
    UnsupportedEnvironment(String),

    /// A caller broke an internal sequencing contract.
    #[error("internal logic error: {0}")]
    Internal(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed TOML: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("malformed metrics file {path}: {reason}")]
    Metrics { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
