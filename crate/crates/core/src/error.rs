use thiserror::Error;

/// Errors surfaced by the simulation, oracle and harness layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("spatial grid too narrow: estimated mass leak {leak:.3e} exceeds {tolerance:.1e}")]
    MassLeak { leak: f64, tolerance: f64 },

    #[error("grid incompatibility: {0}")]
    GridMismatch(String),

    #[error("population explosion in replication {rep}: {count} live particles exceed cap {cap}")]
    Explosion { rep: u64, count: usize, cap: usize },

    #[error("quadrature did not converge: {what} (relative change {change:.3e} > {tolerance:.1e})")]
    NonConvergence {
        what: String,
        change: f64,
        tolerance: f64,
    },

    #[error("covariance kernel is not positive semidefinite: {0}")]
    NotPositiveDefinite(String),

    #[error("no polynomial decay: increment covariance vanishes at T = {0}")]
    NoPolynomialDecay(f64),

    #[error("semigroup self-check failed: numeric mass {numeric} vs analytic {analytic}")]
    SelfCheck { numeric: f64, analytic: f64 },

    #[error("too few replications: {got} < {need}")]
    TooFewReplications { got: usize, need: usize },

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
