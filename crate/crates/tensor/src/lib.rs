//! Dense `f32`/`f64` tensors with tape-based reverse-mode differentiation and
//! the layer, loss and optimizer set used by the crystvox networks.

pub mod checkpoint;
mod element;
pub mod gradcheck;
mod graph;
pub mod ops;
pub mod optim;
mod params;
pub mod selfcheck;
mod tensor;

pub use element::Element;
pub use graph::{BackwardOptions, Gradients, Graph, Var};
pub use ops::{Conv3d, NormMode, BN_EPS, BN_MOMENTUM};
pub use optim::{Adam, AdamConfig};
pub use params::ParamStore;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch norm in train mode needs more than one value per channel")]
    BatchTooSmall,
    #[error("unknown parameter `{0}`")]
    MissingParameter(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
