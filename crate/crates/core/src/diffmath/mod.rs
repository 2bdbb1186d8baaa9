//! Tensor arithmetic, define-by-run reverse-mode differentiation and a
//! deterministic random number generator.
//!
//! A [`Graph`] records every operation applied to its nodes. Leaves created
//! with [`Graph::param`] are tracked; [`Graph::backward`] returns their
//! gradients. Values are `f64` throughout.

pub mod gradcheck;
mod graph;
mod kernels;
mod rng;
mod tensor;

pub use graph::{BatchStats, Gradients, Graph, Var};
pub use rng::{Distribution, Rng};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("axis {axis} out of range for rank-{rank} tensor")]
    Axis { axis: usize, rank: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient flowing into the inputs of {op} (node {node})")]
    NonFiniteGradient { op: &'static str, node: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("batch normalization in training mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
}
