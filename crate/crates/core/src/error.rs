use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in path {path} at step {step}")]
    NonFinite { path: usize, step: usize },

    #[error("time grid of ensemble does not match the problem")]
    GridMismatch,

    #[error("degenerate ensemble: all path weights are zero")]
    DegenerateEnsemble,

    #[error("node {node} out of range (grid has {n_steps} steps)")]
    NodeOutOfRange { node: usize, n_steps: usize },

    #[error(
        "singular normal matrix at node {node} (t = {time}): smallest singular value {sigma_min:.3e}; use ridge > 0"
    )]
    SingularFit { node: usize, time: f64, sigma_min: f64 },

    #[error("non-finite coefficients from solve at node {node} (t = {time})")]
    NonFiniteFit { node: usize, time: f64 },

    #[error("explicit scheme violates the stability limit: dt = {dt:.3e} > {limit:.3e}; use a smaller dt or the implicit scheme")]
    Cfl { dt: f64, limit: f64 },

    #[error("state outside the domain of the closed-form solution: {0}")]
    Domain(String),
}
