use crate::autodiff::GraphError;

/// Errors raised by the model, loss and training routines.
#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("smoothness epsilon must be positive, got {0}")]
    NonPositiveEpsilon(f64),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("transport scores are not finite")]
    NonFiniteScores,
    #[error(
        "transport kernel degenerated (prototype {row} received no mass); retry with a larger epsilon than {epsilon}"
    )]
    KernelUnderflow { row: usize, epsilon: f64 },
    #[error("code column sums to zero")]
    EmptyCode,
    #[error("batch needs at least {needed} items, got {got}")]
    BatchTooSmall { needed: usize, got: usize },
    #[error("empty volume")]
    EmptyVolume,
    #[error("ragged volume: slice {index} is {got:?}, expected {expected:?}")]
    RaggedVolume { index: usize, expected: (usize, usize), got: (usize, usize) },
    #[error("slice extent {0}x{1} is below the 8x8 minimum")]
    SliceTooSmall(usize, usize),
    #[error("degenerate crop window: {0}")]
    DegenerateCrop(String),
    #[error("sequence of length {len} is too short for {blocks} pyramid blocks (needs at least {required})")]
    SequenceTooShort { len: usize, blocks: usize, required: usize },
    #[error("mask ratio must lie in (0, 1], got {0}")]
    MaskRatio(f64),
    #[error("mask plan masks no positions")]
    NothingMasked,
    #[error("mask plan has length {plan}, volume has {slices} slices")]
    MaskLength { plan: usize, slices: usize },
    #[error("{0}")]
    Prerequisite(String),
    #[error("non-finite loss at stage {stage}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss { stage: u8, epoch: usize, batch: usize },
    #[error("probe needs at least 2 classes with 10 samples each: {0}")]
    ProbeInput(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
