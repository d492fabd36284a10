use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model specification: {0}")]
    Spec(String),

    #[error("rank-deficient fixed-effect design: {0}")]
    Design(String),

    #[error("REML search did not converge after {iterations} iterations (last deviance {deviance})")]
    NonConvergence {
        iterations: usize,
        deviance: f64,
        trace: Vec<f64>,
    },

    #[error("unknown coefficient `{0}`")]
    UnknownCoefficient(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
