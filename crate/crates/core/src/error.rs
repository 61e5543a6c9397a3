use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// Two parameter sets, matrices or label vectors disagree in shape.
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    /// Every query was dropped because no valid gallery match remained.
    #[error("no evaluable query: every query lacks a valid gallery match")]
    NoValidQuery,

    #[error(
        "profiling scorer unavailable for client {client}: {reason}; supply a labeled \
         validation split (query/gallery) or a label-free scorer"
    )]
    ScorerUnavailable { client: usize, reason: String },

    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("round {round}, client {client}: {source}")]
    Round {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn in_round(self, round: usize, client: usize) -> Self {
        Error::Round {
            round,
            client,
            source: Box::new(self),
        }
    }
}
