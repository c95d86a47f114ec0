use thiserror::Error;

/// Errors raised by the numerical pipeline.
#[derive(Debug, Error)]
pub enum LakeError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("recycling curve `{name}` failed its audit: {reasons:?}")]
    CurveAudit { name: String, reasons: Vec<String> },

    #[error("equilibrium precondition violated: {0}")]
    NotAnEquilibrium(String),

    #[error("manifold integration failed: {0}")]
    Manifold(String),

    #[error("candidate value function does not cover [{lo}, {hi}]")]
    CoverageGap { lo: f64, hi: f64 },

    #[error("HJB policy iteration did not converge after {iterations} iterations (last residual {last:e})")]
    NoConvergence {
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },

    #[error(
        "policy hit the floor at {hits} of {nodes} nodes; enlarge the domain or check parameters"
    )]
    PolicyFloor { hits: usize, nodes: usize },

    #[error("potential is not a double well: {0}")]
    NotBistable(String),

    #[error("tail truncation bound {bound:e} exceeds 1e-6 of the value {value:e}; raise y_upper")]
    TailTooLarge { bound: f64, value: f64 },

    #[error("{censored} of {paths} paths hit the time cap")]
    Censored { censored: usize, paths: usize },

    #[error("cache I/O: {0}")]
    Cache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LakeError>;
