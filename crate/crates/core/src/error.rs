use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("index {index} out of range (size {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("meshes cover different domains: [0, {left}] vs [0, {right}]")]
    DomainMismatch { left: f64, right: f64 },

    #[error("target mesh does not contain every node of the source mesh")]
    NotARefinement,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cost window [{a}, {b}] is not aligned with the time grid")]
    WindowNotAligned { a: f64, b: f64 },

    #[error("singular tridiagonal system at row {row}")]
    Singular { row: usize },

    #[error("Newton iteration failed on slab {slab}: residual history {history:?}")]
    NewtonFailed { slab: usize, history: Vec<f64> },

    #[error("conjugate gradients did not converge in {iterations} iterations (relative residual {residual:e})")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("optimization did not converge in {iterations} iterations (gradient norm {gradient_norm:e})")]
    OcpNotConverged { iterations: usize, gradient_norm: f64 },

    #[error("line search failed after {halvings} halvings")]
    LineSearchFailed { halvings: usize },

    #[error("reconstruction needs more data: {0}")]
    InsufficientData(String),

    #[error("adaptive round {round} failed: {source}")]
    AdaptRound {
        round: usize,
        /// Rounds completed before the failure.
        history: Vec<crate::adapt::HistoryRow>,
        #[source]
        source: Box<Error>,
    },

    #[error("MPC step {step} failed: {source}")]
    MpcStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for failures of an iterative solver, as opposed to invalid input.
    pub fn is_nonconvergence(&self) -> bool {
        match self {
            Error::NewtonFailed { .. }
            | Error::CgNotConverged { .. }
            | Error::OcpNotConverged { .. }
            | Error::LineSearchFailed { .. }
            | Error::Singular { .. } => true,
            Error::MpcStep { source, .. } | Error::AdaptRound { source, .. } => source.is_nonconvergence(),
            _ => false,
        }
    }
}
