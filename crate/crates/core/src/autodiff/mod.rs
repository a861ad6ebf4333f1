//! Dense tensors and a reverse-mode differentiation engine.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{check_gradient, check_group, LeafCheck};
pub use graph::{DetachedFn, Graph, GraphError, GraphResult, Var};
pub use tensor::Tensor;
