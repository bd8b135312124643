use crystvox_core::NUM_CLASSES;
use crystvox_tensor::Conv3d;
use serde::{Deserialize, Serialize};

use crate::ModelError;

/// Network shapes. `paper()` is the full-size architecture; `desk()` keeps the
/// same topology with narrow layers for CPU training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid_side: usize,
    pub latent_dim: usize,
    /// Output channels of the four encoder convolutions.
    pub enc_channels: [usize; 4],
    /// Channels after the decoder reshape, then after each of the three upsampling stages.
    pub dec_channels: [usize; 4],
    /// Spatial side of the decoder reshape.
    pub dec_base_side: usize,
    pub unet_base: usize,
    pub num_classes: usize,
    pub attention: bool,
    /// Bias terms in the decoder. Without them the decoder is positively
    /// homogeneous, `D(αz) = α·D(z)`, which conditioned training relies on.
    pub decoder_bias: bool,
    pub leaky_slope: f64,
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            grid_side: 30,
            latent_dim: 300,
            enc_channels: [16, 32, 64, 128],
            dec_channels: [128, 64, 32, 16],
            dec_base_side: 5,
            unet_base: 16,
            num_classes: NUM_CLASSES,
            attention: true,
            decoder_bias: true,
            leaky_slope: 0.01,
        }
    }

    pub fn desk() -> Self {
        Self {
            latent_dim: 32,
            enc_channels: [4, 8, 8, 16],
            dec_channels: [16, 8, 4, 4],
            unet_base: 4,
            ..Self::paper()
        }
    }

    /// 6³ grid, latent dimension 8; for end-to-end gradient checks.
    pub fn tiny() -> Self {
        Self {
            grid_side: 6,
            latent_dim: 8,
            enc_channels: [2, 2, 3, 3],
            dec_channels: [3, 2, 2, 2],
            dec_base_side: 1,
            unet_base: 2,
            num_classes: 4,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    /// Encoder convolutions as `(kernel, stride/padding)`.
    pub fn encoder_layers() -> [(usize, Conv3d); 4] {
        [(5, Conv3d::new(2, 2)), (3, Conv3d::new(1, 1)), (3, Conv3d::new(1, 1)), (3, Conv3d::new(2, 1))]
    }

    /// Spatial side after each encoder convolution.
    pub fn encoder_trace(&self) -> Vec<usize> {
        let mut side = self.grid_side;
        Self::encoder_layers()
            .iter()
            .map(|(k, c)| {
                side = c.output_extent(side, *k).unwrap_or(0);
                side
            })
            .collect()
    }

    pub fn encoder_features(&self) -> usize {
        self.encoder_trace().last().copied().unwrap_or(0).pow(3) * self.enc_channels[3]
    }

    /// Spatial side entering the final resize.
    pub fn decoder_side(&self) -> usize {
        self.dec_base_side * 8
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.grid_side < 4 {
            return bad(format!("grid side {} is too small", self.grid_side));
        }
        if self.encoder_trace().contains(&0) {
            return bad(format!("grid side {} does not survive the encoder", self.grid_side));
        }
        if self.latent_dim == 0 || self.dec_base_side == 0 || self.unet_base == 0 {
            return bad("latent dim, decoder base side and U-Net width must be positive".into());
        }
        if self.enc_channels.contains(&0) || self.dec_channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        Ok(())
    }
}

/// Segmentation loss used for `L_BCE` in both objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegLoss {
    /// Per-channel sigmoid binary cross-entropy against the one-hot target.
    #[default]
    Bce,
    /// Softmax cross-entropy over classes (ablation).
    SoftmaxCe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// KL weight.
    pub beta: f64,
    /// Weight of the segmentation loss inside the VAE objective.
    pub gamma: f64,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Divide encoder outputs by, and multiply decoder inputs with, the
    /// sample's normalized max density.
    pub conditioned: bool,
    /// Normalizer for conditioning factors (dataset-max voxel value).
    pub density_scale: f64,
    pub seg_loss: SegLoss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1e-3,
            gamma: 0.1,
            lr: 1e-5,
            batch: 24,
            seed: 0,
            conditioned: false,
            density_scale: 1.0,
            seg_loss: SegLoss::Bce,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.beta >= 0.0
            && self.gamma >= 0.0
            && self.lr > 0.0
            && self.batch > 0
            && self.density_scale > 0.0
            && [self.beta, self.gamma, self.lr, self.density_scale].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(format!("{self:?}")))
        }
    }
}
