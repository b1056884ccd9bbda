use thiserror::Error;

pub type Result<T> = std::result::Result<T, LqError>;

#[derive(Debug, Clone, Error)]
pub enum LqError {
    #[error("structural error: {0}")]
    Structural(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("integration diverged in {what} at step {step}")]
    Divergence { what: String, step: usize },
    #[error("no convergence after {iterations} iterations (last difference {last_diff:e})")]
    NonConvergence {
        iterations: usize,
        last_diff: f64,
        history: Vec<f64>,
    },
    #[error("monotone chain broken at iteration {iteration}, node {node}: min eigenvalue {min_eig:e}")]
    Monotonicity {
        iteration: usize,
        node: usize,
        min_eig: f64,
    },
    #[error("{what} is not positive definite at node {node}")]
    Singular { what: String, node: usize },
    #[error("{what} lost positivity at node {node}: min eigenvalue {min_eig:e}")]
    Positivity { what: String, node: usize, min_eig: f64 },
    #[error("closed form blows up: {0}")]
    BlowUp(String),
    #[error("regression failed: {0}")]
    Regression(String),
    #[error("inadmissible control: {0}")]
    Admissibility(String),
}
