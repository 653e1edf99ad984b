use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coefficient evaluation produced a non-finite entry in {what} at t = {t}")]
    Evaluation { what: &'static str, t: f64 },

    #[error("ODE integration diverged at tau = {tau}")]
    Divergence { tau: f64 },

    #[error("quadrature tolerance not met: achieved residual {achieved:e}, target {target:e}")]
    ToleranceNotMet { achieved: f64, target: f64 },

    #[error("degenerate covariance: smallest eigenvalue {min_eigenvalue:e}")]
    DegenerateCovariance { min_eigenvalue: f64 },

    #[error("linear solve failed: relative residual {residual:e}")]
    Solver { residual: f64 },

    #[error("Picard series did not converge: last term {est_error:e} exceeds tolerance {tol:e} at k_max = {k_max}")]
    NonConvergence { est_error: f64, tol: f64, k_max: usize },

    #[error("point {point:?} lies outside the grid box")]
    OutOfRange { point: Vec<f64> },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Usage and configuration problems map to exit code 2, everything
    /// numerical to 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) | Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => 2,
            _ => 3,
        }
    }
}
