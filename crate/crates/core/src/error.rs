use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter `{name}` out of domain: {reason}")]
    ParameterDomain { name: &'static str, reason: String },

    #[error("parameter supports overlap: H0 upper bound {h0_hi} must lie below H1 lower bound {h1_lo}")]
    SupportOverlap { h0_hi: f64, h1_lo: f64 },

    #[error("statistic likelihood is undefined at n = 0; use the prior")]
    UndefinedLikelihood,

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid does not cover the predictive support: {} row(s) leak more than {tolerance:e} of their mass, first offenders (n, t_index, leak): {offenders:?}", .count)]
    GridCoverage {
        tolerance: f64,
        count: usize,
        offenders: Vec<(usize, usize, f64)>,
    },

    #[error("no transition out of the final stage n = {0}")]
    NoTransition(usize),

    #[error("regularization weight {epsilon:e} must be non-negative and below {bound:e}")]
    RegularizationDomain { epsilon: f64, bound: f64 },

    #[error("constraints cannot be met within the horizon: the design objective is unbounded")]
    Unattainable,

    #[error("LP solver failed ({status}): primal residual {primal_residual:e}, dual residual {dual_residual:e}")]
    Solver {
        status: String,
        primal_residual: f64,
        dual_residual: f64,
    },

    #[error("dual ascent did not converge in {iterations} iterations (gradient norm {gradient_norm:e}, last C = {last:?})")]
    NonConvergence {
        iterations: usize,
        gradient_norm: f64,
        last: [f64; 4],
    },

    #[error("simulation needs at least one run")]
    EmptySimulation,

    #[error("invalid constraints: {0}")]
    InvalidConstraints(String),

    #[error("artifact version mismatch: expected `{expected}`, found `{found}`")]
    VersionMismatch { expected: String, found: String },

    #[error("artifact table `{table}` has {found} entries, expected {expected}")]
    ShapeMismatch {
        table: String,
        expected: usize,
        found: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
