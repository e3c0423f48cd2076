use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported ambient dimension {0} (expected 2 or 3)")]
    Dimension(usize),

    #[error("invalid grid resolution {resolution} for dimension {dim}")]
    Resolution { dim: usize, resolution: usize },

    #[error("field has {got} values but the grid has {expected} nodes")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite value at node {0}")]
    NonFinite(usize),

    #[error("convexity lost at {} node(s), first {:?}", .nodes.len(), .nodes.first())]
    ConvexityLoss { nodes: Vec<usize> },

    #[error("ill-conditioned derivative stencil at {} node(s)", .0.len())]
    IllConditioned(Vec<usize>),

    #[error("point lies outside the body (gap {gap:.3e})")]
    OutsideBody { gap: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("estimator did not reach tolerance: relative error {achieved:.3e} > {requested:.3e}")]
    NonConvergence { achieved: f64, requested: f64 },

    #[error("time step underflow: dt {dt:.3e} < dt_min {dt_min:.3e} at t = {t:.6}")]
    DtUnderflow { dt: f64, dt_min: f64, t: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
