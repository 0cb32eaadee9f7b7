use thiserror::Error;

/// Errors surfaced by the identification toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    /// The Tustin image has a vanishing leading denominator coefficient.
    #[error("degenerate Tustin map: |a_n| = {an:e} <= {tol:e}")]
    DegenerateMap { an: f64, tol: f64 },

    /// A structural check on a constructed object failed. Always a bug.
    #[error("internal invariant violated: {0}")]
    Invariant(String),

    /// The data falsify the assumed model class or bounds.
    #[error("identification infeasible: {0}")]
    Infeasible(String),

    #[error("relaxation failed: {0}")]
    RelaxationFailure(String),

    #[error("discretization bound estimation failed: {0}")]
    BoundEstimation(String),

    #[error("FIT undefined: measured output is constant")]
    UndefinedFit,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
