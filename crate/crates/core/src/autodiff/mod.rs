//! Dense 2-D arrays with reverse-mode differentiation.
//!
//! Every value on a [`Graph`] is a row-major matrix; vectors are single rows
//! and scalars are `1×1`. The only implicit broadcast is [`Graph::add_bias`].

mod gradcheck;
mod graph;
mod tensor;


pub use gradcheck::{grad_check, sample_coords, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::{ParamId, ParamStore, Tensor};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("tensor of shape {shape:?} has more than two dimensions")]
    Rank { shape: Vec<usize> },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("backward requires a 1x1 loss, got {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("non-finite value first produced by `{op}` at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("finite-difference step {0} outside [1e-5, 1e-3]")]
    Step(f64),
}
