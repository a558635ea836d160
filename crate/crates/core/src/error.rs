use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("quantile level {0} is outside (0, 1)")]
    InvalidTau(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Panel structure problems found while loading or validating data.
    #[error("invalid panel: {0}")]
    InvalidPanel(String),

    #[error("parameter {index} is not identified ({reason})")]
    Unidentified { index: usize, reason: String },

    #[error("solver did not converge after {iterations} iterations (relative gap {gap:.3e})")]
    NonConvergence { iterations: usize, gap: f64 },

    #[error("singular matrix in {0}")]
    Singular(String),

    #[error("complete separation detected in logit fit (standardized coefficient exceeded {bound})")]
    Separation { bound: f64 },

    #[error("propensity estimation failed: {0}")]
    Propensity(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn panel(msg: impl Into<String>) -> Self {
        Error::InvalidPanel(msg.into())
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidTau(tau))
    }
}
