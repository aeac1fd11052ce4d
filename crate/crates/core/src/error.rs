use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid world: {0}")]
    InvalidWorld(String),

    #[error("activation violates a(t) + a(-t) = 1 or leaves [0,1] at t = {probe}")]
    InvalidActivation { probe: f64 },

    #[error("preference kernel is not antisymmetric at (x={x}, y1={y1}, y2={y2}): deviation {deviation:e}")]
    MalformedKernel {
        x: usize,
        y1: usize,
        y2: usize,
        deviation: f64,
    },

    #[error("flip probability {0} outside [0, 0.5)")]
    InvalidFlipProbability(f64),

    #[error("prompt {0} has no reference mass")]
    DegeneratePrompt(usize),

    #[error("zero probability for response {y} under prompt {x}")]
    SupportViolation { x: usize, y: usize },

    #[error("index out of bounds: {0}")]
    OutOfBounds(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("objective diverged: non-finite {what} at iteration {iter}")]
    Diverged { what: &'static str, iter: usize },

    #[error("optimizer did not reach gradient norm {tol:e} (got {grad_norm:e})")]
    NotConverged { grad_norm: f64, tol: f64 },

    #[error("curvature matrix is singular: smallest eigenvalue {lambda_min:e}")]
    SingularCurvature { lambda_min: f64 },

    #[error("{0} is only defined for the cross-entropy loss with sigmoid activation")]
    Unsupported(&'static str),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
