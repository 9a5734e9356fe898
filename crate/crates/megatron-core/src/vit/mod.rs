//! A small, self-contained vision transformer.
//!
//! Patch embedding → pre-LN encoder layers (multi-head self-attention + MLP)
//! → class-token classifier. Forward passes expose the per-layer post-softmax
//! attention matrices, their gradients with respect to a target logit, the
//! class-token feature vector, and input-pixel gradients for a family of
//! scalar losses. Training is plain seeded mini-batch SGD with cross-entropy.

mod checkpoint;
mod model;
mod ops;
mod params;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{DiffForward, LossSelector, VitModel};
pub use ops::{attention, multi_head_attention, MhaWeights};
pub use params::Params;
pub use train::{mean_cross_entropy, train};

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Image side in pixels (images are square).
    pub image_size: usize,
    /// Patch side in pixels.
    pub patch_size: usize,
    /// Encoder layer count.
    pub n_layers: usize,
    /// Attention heads per layer.
    pub n_heads: usize,
    /// Token embedding dimensionality.
    pub embed_dim: usize,
    /// Output classes.
    pub n_classes: usize,
    /// Hidden width of the MLP as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    /// Input channels.
    pub channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Desk-scale default: 32x32 inputs, 65 tokens, CPU-friendly.
        Self {
            image_size: 32,
            patch_size: 4,
            n_layers: 4,
            n_heads: 4,
            embed_dim: 64,
            n_classes: 2,
            mlp_ratio: 4,
            channels: 3,
        }
    }
}

impl ModelConfig {
    /// Preset matching the common 224x224 / 16-pixel-patch layout.
    pub fn large_input_preset(n_classes: usize) -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            n_layers: 12,
            n_heads: 12,
            embed_dim: 768,
            n_classes,
            mlp_ratio: 4,
            channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Input(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::Input(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.n_classes < 2 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Input(
                "n_layers, mlp_ratio and channels must be >= 1 and n_classes >= 2".into(),
            ));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count p = grid² + 1 (class token at index 0).
    pub fn token_count(&self) -> usize {
        self.grid_side() * self.grid_side() + 1
    }

    /// Flattened pixel count of one patch.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

/// An image with its class label. Pixels are (channels, height, width) in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: Array3<f64>,
    pub label: usize,
}

impl ImageSample {
    pub fn new(pixels: Array3<f64>, label: usize) -> Result<Self> {
        if pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Input("pixel values must lie in [0,1]".into()));
        }
        Ok(Self { pixels, label })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[0], s[1], s[2])
    }

    pub fn matches(&self, config: &ModelConfig) -> Result<()> {
        let (c, h, w) = self.shape();
        if c != config.channels || h != config.image_size || w != config.image_size {
            return Err(Error::Dimension(format!(
                "image shape ({c},{h},{w}) does not match config ({},{},{})",
                config.channels, config.image_size, config.image_size
            )));
        }
        Ok(())
    }
}

/// Attention matrices and summary outputs captured during one forward pass.
///
/// `attn[l]` has shape (heads, p, p) and holds the post-softmax weights of
/// layer `l`. `attn_grad`, when present, holds ∂y_target/∂attn with the same
/// shapes. `features` is the class-token embedding after the final layer
/// norm, before the classifier head.
#[derive(Debug, Clone)]
pub struct AttentionStack {
    pub attn: Vec<Array3<f64>>,
    pub attn_grad: Option<Vec<Array3<f64>>>,
    pub logits: Array1<f64>,
    pub features: Array1<f64>,
}

impl AttentionStack {
    pub fn n_layers(&self) -> usize {
        self.attn.len()
    }

    /// Head-averaged attention matrix of the last layer.
    pub fn last_layer_head_avg(&self) -> ndarray::Array2<f64> {
        let last = self.attn.last().expect("at least one layer");
        last.mean_axis(ndarray::Axis(0)).expect("non-empty heads")
    }

    pub fn predicted_label(&self) -> usize {
        self.logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .expect("non-empty logits")
    }
}

/// Victim/surrogate trainer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.01,
            batch_size: 32,
            seed: 0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Input("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Input("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Input("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn config_invariants() {
        let mut cfg = ModelConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.token_count(), 65);
        cfg.patch_size = 5;
        assert!(cfg.validate().is_err());
        cfg.patch_size = 4;
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sample_rejects_out_of_range_pixels() {
        let mut px = Array3::zeros((3, 4, 4));
        px[[0, 0, 0]] = 1.5;
        assert!(ImageSample::new(px, 0).is_err());
    }

    #[test]
    fn token_count_large_preset() {
        let cfg = ModelConfig::large_input_preset(10);
        assert_eq!(cfg.token_count(), 14 * 14 + 1);
    }
}
