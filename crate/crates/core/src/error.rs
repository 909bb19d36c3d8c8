use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("design matrix is rank deficient ({rank} of {cols} columns identified)")]
    SingularDesign { rank: usize, cols: usize },

    #[error("spline basis is degenerate: every eigenvalue of the knot Gram matrix was truncated")]
    DegenerateBasis,

    #[error("sampler failure in {stage} stage at iteration {iteration}: {message}")]
    Sampler {
        stage: &'static str,
        iteration: usize,
        message: String,
    },

    #[error("study aborted: {failed} of {total} replicates failed")]
    Study { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for errors that originate in an MCMC sampler.
    pub fn is_sampler_failure(&self) -> bool {
        matches!(self, Error::Sampler { .. } | Error::SingularDesign { .. } | Error::DegenerateBasis)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
