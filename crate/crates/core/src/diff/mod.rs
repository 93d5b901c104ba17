//! Reverse-mode differentiation over dense f64 matrices, Adam, and
//! finite-difference gradient verification.

mod gradcheck;
mod graph;
mod matrix;
mod optim;
mod params;

use thiserror::Error;

pub use gradcheck::finite_diff_check;
pub use graph::{
    backward, backward_from, forward, Gradients, Graph, Inputs, NodeId, Op, Values, COSINE_EPS,
    LAYER_NORM_EPS,
};
pub use matrix::Matrix;
pub use optim::{adam_step, AdamConfig, AdamState, LrSchedule};
pub use params::{ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("unbound input or parameter `{0}`")]
    Unbound(String),
    #[error("loss must be 1x1, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("gradient for `{name}` has shape {grad:?}, parameter has {param:?}")]
    GradientShape {
        name: String,
        param: (usize, usize),
        grad: (usize, usize),
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = DiffError> = std::result::Result<T, E>;
