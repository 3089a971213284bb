use thiserror::Error;

/// Errors shared across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Distance transform on a grid with no free cell.
    #[error("no free space: every cell is occupied")]
    NoFreeSpace,

    /// Query point outside the configuration bounds.
    #[error("out of domain: configuration {0:?}")]
    OutOfDomain(Vec<f64>),

    /// Rejection sampler gave up: acceptance rate below 0.1% after the trial budget.
    #[error("free space too small: acceptance rate {rate:.6} after {trials} trials")]
    FreeSpaceTooSmall { rate: f64, trials: usize },

    /// Fast-marching source cell is occupied.
    #[error("source in obstacle")]
    SourceInObstacle,

    /// Backtrack goal has non-finite travel time.
    #[error("unreachable: travel time at goal is not finite")]
    Unreachable,

    /// Gradient descent on the travel-time field hit its iteration cap.
    #[error("backtrack stalled after {0} iterations")]
    BacktrackStalled(usize),

    /// Incompatible array shapes.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Non-finite gradient during an optimizer step.
    #[error("gradient blowup in parameter '{0}'")]
    GradientBlowup(String),

    /// Travel-time gradient norm below the guard; the optimal action is undefined.
    #[error("degenerate gradient: norm {0:e} at or below guard")]
    DegenerateGradient(f64),

    /// Model produced a non-finite travel time.
    #[error("model diverged: non-finite travel time")]
    ModelDiverged,

    /// Non-finite loss for a batch element.
    #[error("loss blowup at batch index {0}")]
    LossBlowup(usize),

    /// Error comparison over an empty cell mask.
    #[error("empty mask: no cells to compare")]
    EmptyMask,

    /// Reverse sweep requested before the tape was sealed.
    #[error("unsealed tape")]
    UnsealedTape,

    /// Reverse sweep seeded from a node that is not a scalar loss.
    #[error("non-scalar loss node")]
    NonScalarLoss,

    /// Invalid configuration value or checkpoint/config mismatch.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input file.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
