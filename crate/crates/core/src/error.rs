use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("power iteration for component {component} did not converge (residual {residual:e})")]
    NoConvergence { component: usize, residual: f64 },

    #[error("non-finite activation at layer {layer}")]
    NonFinite { layer: usize },

    #[error("degenerate prior: {0}")]
    DegeneratePrior(String),

    #[error("training diverged at step {step}: loss {loss} stayed above {threshold} for {window} steps")]
    Diverged {
        step: usize,
        loss: f64,
        threshold: f64,
        window: usize,
    },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
