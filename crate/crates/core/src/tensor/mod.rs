//! Dense float64 tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod graph;
mod kernels;
#[allow(clippy::module_inception)]
mod tensor;

pub use gradcheck::{grad_check, GRAD_CHECK_FLOOR};
pub use graph::{AttentionLayout, Graph, OpKind, Var};
pub use kernels::{gemm, Layout};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not hold {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("cross-entropy has no target rows")]
    EmptyTargets,
    #[error("backward already ran on this graph; call reset_grads first")]
    AlreadyBackpropagated,
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}
