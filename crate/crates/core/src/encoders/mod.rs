//! Miniature transformer backbones for both modalities, the MAE decoder,
//! and the assembled multimodal model.

mod block;
mod decoder;
mod image;
mod model;
mod patch;
mod point;

pub use block::{Attention, Block, Norm, NormCtx, NormScope, Windows};
pub use decoder::MaeDecoder;
pub use image::{ImageEncoder, ImageOutput};
pub use model::{ForwardOptions, Model, ModelConfig, ModelOutput, NormAudit};
pub use patch::{apply_mask, patchify, unpatchify, PatchGrid};
pub use point::{point_features, PointEncoder};

pub use crate::geometry::BevFeatureMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageEncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub block_count: usize,
    /// Side length of a square attention window, in tokens.
    pub window_size: usize,
    pub head_count: usize,
    pub mask_ratio: f64,
    pub bev_feature_dim: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 16,
            block_count: 1,
            window_size: 2,
            head_count: 2,
            mask_ratio: 0.5,
            bev_feature_dim: 16,
        }
    }
}

impl ImageEncoderConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "image {height}x{width} not divisible by patch size {p}"
            )));
        }
        if self.head_count == 0 || !self.embed_dim.is_multiple_of(self.head_count) {
            return Err(Error::Config(format!(
                "image embed_dim {} not divisible by {} heads",
                self.embed_dim, self.head_count
            )));
        }
        let (r, c) = (height / p, width / p);
        if self.window_size == 0 || r % self.window_size != 0 || c % self.window_size != 0 {
            return Err(Error::Config(format!(
                "token grid {r}x{c} not divisible by window {}",
                self.window_size
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask_ratio {} outside [0, 1)",
                self.mask_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointEncoderConfig {
    /// Per-cell input width: the pooled point columns plus the count.
    pub input_feature_dim: usize,
    pub embed_dim: usize,
    pub block_count: usize,
    pub head_count: usize,
    pub bev_feature_dim: usize,
    /// Add a learned per-cell positional embedding to the cell tokens.
    pub positional: bool,
}

impl Default for PointEncoderConfig {
    fn default() -> Self {
        Self {
            input_feature_dim: 5,
            embed_dim: 16,
            block_count: 1,
            head_count: 2,
            bev_feature_dim: 16,
            positional: true,
        }
    }
}

impl PointEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_count == 0 || !self.embed_dim.is_multiple_of(self.head_count) {
            return Err(Error::Config(format!(
                "point embed_dim {} not divisible by {} heads",
                self.embed_dim, self.head_count
            )));
        }
        if self.input_feature_dim < 4 {
            return Err(Error::Config(
                "point input_feature_dim must be at least 4".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Decoder width; half the image embed width when absent.
    pub width: Option<usize>,
    pub block_count: usize,
    pub head_count: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            width: None,
            block_count: 1,
            head_count: 1,
        }
    }
}
