//! The crystvox networks: a 3-D convolutional VAE over density grids, a
//! segmentation U-Net producing per-voxel species scores, max-density
//! conditioning, a realism discriminator, and the joint training loop.

mod config;
mod data;
pub mod discriminator;
mod layers;
mod loss;
pub mod train;
pub mod toy;
pub mod unet;
pub mod vae;

pub use config::{ModelConfig, SegLoss, TrainConfig};
pub use data::{batch_tensors, dataset_max_density, TrainSample};
pub use loss::{unet_loss, vae_loss, LossTerms};
pub use train::{JointStep, MetricsRecord, StepOutputs, Trainer};
pub use vae::{condition_scale, latent_interpolate, sample_prior, EncoderOutput, LatentVector};

use crystvox_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("conditioning factor must be positive, got {0}")]
    NonPositiveAlpha(f64),
    #[error("the discriminator has not been trained")]
    UntrainedModel,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Parameter-name prefixes of the four networks.
pub const ENCODER: &str = "enc.";
pub const DECODER: &str = "dec.";
pub const UNET: &str = "unet.";
pub const DISCRIMINATOR: &str = "disc.";
