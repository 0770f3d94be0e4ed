use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("buffer of length {len} does not fill shape {shape:?}")]
    BadBuffer { shape: Vec<usize>, len: usize },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tensor {0} is not on this graph")]
    NotOnGraph(usize),
    #[error("tensor {0} does not require grad")]
    NotDifferentiable(usize),
    #[error("output is not reachable from tensor {0}")]
    Unreachable(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("class {0} has no samples in the support set")]
    MissingClass(usize),
    #[error("context holds {got} samples, model expects {expected}")]
    ContextLength { expected: usize, got: usize },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("could not place {classes} class centers at separation {min_separation}")]
    InfeasibleSeparation { classes: usize, min_separation: f64 },
    #[error("budget k={k} exceeds perturbable pool of {pool}")]
    BudgetExceedsPool { k: usize, pool: usize },
    #[error("no clean samples of target class {0}")]
    EmptyTarget(usize),
    #[error("class {class} has {have} images, episode needs {need}")]
    InsufficientImages { class: usize, have: usize, need: usize },
}
