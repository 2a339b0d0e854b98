use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("oracle returned a non-finite value at x = {point:?} ({what})")]
    NonFinite { what: &'static str, point: Vec<f64> },

    #[error(
        "subproblem matrix is not positive definite at beta = {beta}; \
         the objective is too weakly convex for this proximal parameter, try a larger beta"
    )]
    NotPositiveDefinite { beta: f64 },

    #[error("proximal parameter exceeded beta_max = {beta_max} (proximal parameter sequence must stay bounded)")]
    BetaUnbounded { beta_max: f64 },

    #[error("inner solver did not converge in {iterations} iterations (gradient norm {residual:e})")]
    InnerNotConverged { iterations: usize, residual: f64 },

    #[error("KKT system is singular: constraint Jacobian is rank deficient (sigma_min = {sigma_min:e})")]
    SingularKkt { sigma_min: f64 },

    #[error("linear solve residual {residual:e} exceeds tolerance {tolerance:e}")]
    InaccurateSolve { residual: f64, tolerance: f64 },

    #[error("missing theory constants: {0}")]
    MissingConstants(String),

    #[error("problem generation failed: {0}")]
    Generator(String),

    #[error("problem file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
