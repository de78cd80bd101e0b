//! Crate-wide error types.
//!
//! Two broad classes matter to callers: *validation* errors ([`Error::Config`],
//! [`Error::Input`]) mean the request could never succeed and map to CLI exit
//! code 2; everything else is a runtime failure and maps to exit code 1.

use thiserror::Error;

use crate::oracle::OracleError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates an invariant (e.g. K > M, zero
    /// necessary frames). Detected before any work starts.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A runtime input violates a precondition (dimension mismatch,
    /// duplicate selection indices, empty video, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A computation produced a non-finite value.
    #[error("numerical failure{}: {msg}", fmt_episode(.episode))]
    Numerical {
        /// Episode during which the failure occurred, when known.
        episode: Option<u64>,
        /// What went non-finite and where.
        msg: String,
    },

    /// An oracle backend call failed.
    #[error("oracle failure{}: {source}", fmt_episode(.episode))]
    Oracle {
        /// Episode during which the failure occurred, when known.
        episode: Option<u64>,
        #[source]
        source: OracleError,
    },

    /// A checkpoint file is malformed or from an unsupported version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<OracleError> for Error {
    fn from(source: OracleError) -> Self {
        Error::Oracle {
            episode: None,
            source,
        }
    }
}

impl Error {
    /// Attaches an episode id to oracle/numerical errors so log readers can
    /// trace a failure back to the episode that produced it.
    pub fn with_episode(self, ep: u64) -> Self {
        match self {
            Error::Oracle { source, .. } => Error::Oracle {
                episode: Some(ep),
                source,
            },
            Error::Numerical { msg, .. } => Error::Numerical {
                episode: Some(ep),
                msg,
            },
            other => other,
        }
    }

    /// True for errors a caller could have prevented by fixing its config
    /// or inputs (CLI exit code 2); false for runtime failures (exit 1).
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Input(_))
    }
}

fn fmt_episode(ep: &Option<u64>) -> String {
    match ep {
        Some(e) => format!(" at episode {e}"),
        None => String::new(),
    }
}
