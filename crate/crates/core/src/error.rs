use std::path::PathBuf;

use thiserror::Error;

use crate::container::ContainerError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Container(#[from] ContainerError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// A domain object violated one of its invariants.
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("too few values: need at least {needed}, got {got}")]
    TooFewValues { needed: usize, got: usize },

    #[error("all {trials} search trials failed")]
    AllTrialsFailed {
        trials: usize,
        log: Vec<crate::encoder::TrialRecord>,
    },

    #[error("stage `{stage}` failed: {reason}")]
    Stage { stage: String, reason: String },
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad inputs rather than by a failing computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Container(_)
                | Error::Io { .. }
                | Error::Json { .. }
                | Error::Invalid { .. }
                | Error::Dimension(_)
        )
    }

    /// Short machine-readable tag used in error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Container(_) => "container",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::Invalid { .. } => "invalid",
            Error::Dimension(_) => "dimension",
            Error::TooFewValues { .. } => "too_few_values",
            Error::AllTrialsFailed { .. } => "all_trials_failed",
            Error::Stage { .. } => "stage",
        }
    }
}
