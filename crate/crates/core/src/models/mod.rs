//! Generator, discriminators, classifier zoo and the frozen perceptual network.

mod checkpoint;
mod classifier;
mod discriminator;
mod generator;
mod perceptual;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, FORMAT_VERSION};
pub use classifier::{argmax, ClassifierArch, ClassifierHandle, Preprocess};
pub use discriminator::{DiscriminatorArch, DiscriminatorSet};
pub(crate) use generator::onehot;
pub use generator::{Generator, GeneratorArch, GeneratorWeights, LayerSpec};
pub use perceptual::{FeatureExtractor, IdentityTap, PerceptualArch, PerceptualNet};

use serde::{Deserialize, Serialize};

use crate::error::{AptError, Result};
use crate::tensor::Tensor;

/// Latent input of the mapping network, `d_z` standard-normal entries.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentZ(pub Vec<f64>);

impl LatentZ {
    pub fn sample(dim: usize, rng: &mut impl rand::Rng) -> Self {
        LatentZ(Tensor::randn(&[dim], 1.0, rng).into_data())
    }

    pub fn zeros(dim: usize) -> Self {
        LatentZ(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassLabel(pub usize);

impl ClassLabel {
    pub fn checked(index: usize, num_classes: usize) -> Result<Self> {
        if index < num_classes {
            Ok(ClassLabel(index))
        } else {
            Err(AptError::InvalidArgument(format!(
                "class {index} outside [0, {num_classes})"
            )))
        }
    }
}

/// Per-layer style matrix `[L, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCode(pub Tensor);

impl StyleCode {
    /// Repeat one style row over `layers` rows.
    pub fn broadcast(row: &[f64], layers: usize) -> Self {
        let mut data = Vec::with_capacity(row.len() * layers);
        for _ in 0..layers {
            data.extend_from_slice(row);
        }
        StyleCode(Tensor::new(vec![layers, row.len()], data))
    }

    pub fn layers(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, l: usize) -> &[f64] {
        let s = self.width();
        &self.0.data()[l * s..(l + 1) * s]
    }

    /// Frobenius norm of `self - other`.
    pub fn distance(&self, other: &StyleCode) -> f64 {
        self.0
            .data()
            .iter()
            .zip(other.0.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// One spatial noise map per synthesis layer, each `[H_l, W_l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMaps(pub Vec<Tensor>);

impl NoiseMaps {
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }
}

/// `[C, H, W]` image in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(pub Tensor);

impl ImageTensor {
    pub fn clamped(&self) -> ImageTensor {
        ImageTensor(self.0.map(|v| v.clamp(-1.0, 1.0)))
    }

    /// `[1, C, H, W]` view for batch-of-one tape inputs.
    pub fn batched(&self) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(self.0.shape());
        self.0.clone().reshape(&shape)
    }
}

/// Model dimensions shared by every network in a fixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub z_dim: usize,
    pub style_dim: usize,
    pub mapping_hidden: usize,
    /// Channels at 4x4; halved per doubling of resolution, never below 8.
    pub gen_base_channels: usize,
    pub disc_channels: usize,
    pub disc_scales: usize,
    pub perceptual_channels: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            z_dim: 16,
            style_dim: 64,
            mapping_hidden: 64,
            gen_base_channels: 64,
            disc_channels: 16,
            disc_scales: 2,
            perceptual_channels: [16, 32, 64],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        if !(image_size.is_power_of_two() && image_size >= 16) {
            return Err(AptError::Config(format!(
                "image_size must be a power of two >= 16 for the style generator, got {image_size}"
            )));
        }
        if self.z_dim == 0 || self.style_dim == 0 || self.mapping_hidden == 0 {
            return Err(AptError::Config("model dimensions must be positive".into()));
        }
        if self.disc_scales == 0 || image_size >> (self.disc_scales - 1) < 8 {
            return Err(AptError::Config(
                "disc_scales leaves a discriminator input smaller than 8x8".into(),
            ));
        }
        if self.perceptual_channels.contains(&0) || self.disc_channels == 0 || self.gen_base_channels == 0 {
            return Err(AptError::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Center-crop side used ahead of classification (32 -> 28, 16 -> 14).
pub fn crop_size(image_size: usize) -> usize {
    (image_size * 7 / 8) & !1
}
