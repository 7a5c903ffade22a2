use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    /// A parameter left the region where the Gaussian quantities are defined.
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("iteration diverged at t = {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("no convergence after {iterations} iterations (last estimate {last_estimate:e})")]
    NonConvergence { iterations: usize, last_estimate: f64 },

    /// Every trial of an experiment cell failed.
    #[error("all {trials} trials of {estimator} at {snr_db} dB failed")]
    AllTrialsFailed { estimator: String, snr_db: f64, trials: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid;
