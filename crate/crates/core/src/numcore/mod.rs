//! Minimal differentiable numerical core: tensors, forward operators,
//! reverse-mode gradients, and the Adam optimizer.

pub mod adam;
pub mod gradcheck;
pub mod ops;
pub mod tensor;

pub use adam::{Adam, AdamHyper};
pub use gradcheck::grad_check;
pub use tensor::{backward, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },
    #[error("input too short: need {needed}, got {got}")]
    InputTooShort { needed: usize, got: usize },
    #[error("backward() requires a scalar loss, got {len} elements")]
    NotScalar { len: usize },
    #[error("operator graph contains a cycle")]
    GraphCycle,
    #[error("target {target} out of range for {classes} classes")]
    BadTarget { target: usize, classes: usize },
    #[error("class weight {weight} is not positive")]
    NonPositiveWeight { weight: f64 },
    #[error("no valid frames to pool")]
    AllFramesInvalid,
}
