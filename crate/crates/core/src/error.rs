use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no positive-degree coefficient exceeds tolerance {tol}")]
    NoPositiveDegree { tol: f64 },

    #[error("insufficient quadrature order: need at least {needed}, rule has {got}")]
    InsufficientQuadratureOrder { needed: usize, got: usize },

    #[error("eigen-solve for quadrature nodes did not converge (order {order})")]
    EigenSolve { order: usize },

    #[error("overlap target {bound:.6} unreachable after {retries} retries")]
    OverlapUnreachable { bound: f64, retries: usize },

    #[error("canonical directions require M <= d (M = {m}, d = {d})")]
    TooManyDirections { m: usize, d: usize },

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("rank deficiency at direction {index}")]
    RankDeficient { index: usize },

    #[error("links have mixed information exponents: {found:?}")]
    MixedInformationExponent { found: Vec<usize> },

    #[error("invalid link function {index}: {reason}")]
    InvalidLink { index: usize, reason: String },

    #[error("non-finite update at step {step}")]
    NonFiniteUpdate { step: u64 },

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    DidNotConverge { iterations: usize, residual: f64 },

    #[error("query budget of {budget} exhausted")]
    BudgetExhausted { budget: u64 },

    #[error("query not normalized: estimated E[g^2] = {second_moment:.6}")]
    QueryNotNormalized { second_moment: f64 },

    #[error("tau^2 = {tau_sq:e} is not above class coherence {coherence:e}")]
    TauBelowCoherence { tau_sq: f64, coherence: f64 },

    #[error("correlation census count {count} exceeds bound {bound}")]
    CensusBoundViolated { count: usize, bound: f64 },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io { path: path.into(), source }
    }

    /// True for failures caused by numerics rather than by the caller's input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            LabError::EigenSolve { .. }
                | LabError::OverlapUnreachable { .. }
                | LabError::RankDeficient { .. }
                | LabError::NonFiniteUpdate { .. }
                | LabError::DidNotConverge { .. }
                | LabError::CensusBoundViolated { .. }
        )
    }
}
