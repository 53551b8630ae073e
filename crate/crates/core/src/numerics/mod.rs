//! Dense matrices, reverse-mode autodiff, optimizers and seeded randomness.
//!
//! Everything here is generic over the element type via [`Scalar`]; the rest
//! of the crate uses the `f64` aliases exported from the crate root.

mod gradcheck;
mod graph;
mod matrix;
mod optim;
mod rng;
mod scalar;

use thiserror::Error;

pub use gradcheck::{finite_diff_grad, relative_error, FD_STEP};
pub use graph::{Gradients, Graph, NodeId, OpKind};
pub use matrix::Matrix;
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind, ParamSlot};
pub use rng::{derive_seed, Rng};
pub use scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {}x{} vs {}x{}", left.0, left.1, right.0, right.1)]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    InvalidLength { rows: usize, cols: usize, len: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("loss must be 1x1, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("graph cycle detected at node {node}")]
    Cycle { node: usize },
    #[error("missing gradient for trainable parameter {0}")]
    MissingGradient(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}
