use thiserror::Error;

use crate::expr::ExprError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("quadrature did not converge: error estimate {estimate:e} exceeds tolerance {tolerance:e} ({context})")]
    Quadrature {
        context: String,
        estimate: f64,
        tolerance: f64,
    },

    #[error("variance curve decreases by {drop:e} between t = {t_prev} and t = {t}")]
    Monotonicity { t_prev: f64, t: f64, drop: f64 },

    #[error("variance rate not positive at t = {t} (rate = {rate:e})")]
    Positivity { t: f64, rate: f64 },

    #[error("resource budget exceeded: {requested} path cells requested, budget is {budget}")]
    Resource { requested: usize, budget: usize },

    #[error("growth bound violated: estimated exponent {estimate:e} is not below {bound:e} ({context})")]
    Growth {
        context: String,
        estimate: f64,
        bound: f64,
    },

    #[error("Picard iteration did not converge after {iterations} sweeps (last change {last:e})")]
    NonConvergence {
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },

    #[error("theta scheme unstable at step {step}: sup-norm amplified by {amplification:e}")]
    Instability { step: usize, amplification: f64 },

    #[error("{fraction:e} of (t, N_t) points left the PDE box (limit 1e-3)")]
    DomainEscape { fraction: f64, escaped: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(transparent)]
    Expr(#[from] ExprError),
}
