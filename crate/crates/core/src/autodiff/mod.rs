//! Dense reverse-mode differentiation over `f64` tensors.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Node
//! indices are assigned in creation order, so walking the node list
//! backwards is a valid reverse topological order and each node is visited
//! once.
//!
//! ```
//! use semood::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.constant(Tensor::vector(vec![2.0, -1.0, 0.5]));
//! let x = g.param(Tensor::vector(vec![1.0, 1.0, 1.0]));
//! let y = g.dot(w, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -1.0, 0.5]);
//! ```

mod checkpoint;
mod graph;
mod optim;
mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{grad_wrt_input, Gradients, Graph, Var};
pub use optim::{Optimizer, UpdateRule};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    InvalidShape(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("{op}: row {row} has zero norm")]
    ZeroNorm { op: &'static str, row: usize },
    #[error("{op}: target {target} out of range for {classes} classes")]
    TargetOutOfRange {
        op: &'static str,
        target: usize,
        classes: usize,
    },
    #[error("learning rate must be non-negative, got {0}")]
    NegativeLearningRate(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}
