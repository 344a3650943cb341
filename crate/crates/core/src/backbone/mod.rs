//! Vision transformer encoders: the segmentation image encoder with adapter
//! hook points, the vision-language image encoder and the text encoder.

mod accounting;
mod text;
mod vit;

pub use accounting::{count_parameters, is_adapter, ParamEntry, ParamReport, COMPONENTS};
pub use text::{TextConfig, TextEmbeddingCache, TextEncoder, Tokenizer, DEFAULT_TEMPLATE};
pub use vit::{Block, SegImageEncoder, VisionEncoder};

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl EncoderConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        let err = |what: &str, reason: String| Err(Error::config(format!("{field}.{what}"), reason));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return err(
                "image_size",
                format!("{} is not divisible by patch_size {}", self.image_size, self.patch_size),
            );
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return err("width", format!("{} is not divisible by heads {}", self.width, self.heads));
        }
        if self.depth == 0 {
            return err("depth", "must be at least 1".into());
        }
        if !(self.mlp_ratio > 0.0) {
            return err("mlp_ratio", "must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn mlp_dim(&self) -> usize {
        (self.width as f64 * self.mlp_ratio).round() as usize
    }
}

/// Per-patch vision-language features `V (N x C_c)` on a row-major grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbeddings {
    pub values: Array2<f64>,
    pub grid: (usize, usize),
}

impl PatchEmbeddings {
    pub fn new(values: Array2<f64>, grid: (usize, usize)) -> Result<Self> {
        if values.nrows() != grid.0 * grid.1 {
            return Err(Error::input(format!(
                "{} patch rows do not fill a {}x{} grid",
                values.nrows(),
                grid.0,
                grid.1
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("patch embeddings contain non-finite values"));
        }
        Ok(Self { values, grid })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub values: Array1<f64>,
}

impl TextEmbedding {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("text embedding contains non-finite values"));
        }
        Ok(Self { values })
    }
}

/// Channels-last feature map `H x W x C` after a given block (or the neck, `layer_index == depth`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Array3<f64>,
    pub layer_index: usize,
}

impl FeatureMap {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.values.dim()
    }
}

/// Channels-last `(H, W, 3)` image batch to a `(B, H, W, 3)` tensor scaled to `[-1, 1]`.
pub fn images_to_tensor(images: &[&Array3<f32>]) -> Result<candle_core::Tensor> {
    let (h, w, c) = images[0].dim();
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.dim() != (h, w, c) {
            return Err(Error::input("images in a batch must share dimensions"));
        }
        data.extend(img.iter().map(|&x| x * 2.0 - 1.0));
    }
    Ok(candle_core::Tensor::from_vec(data, (images.len(), h, w, c), &candle_core::Device::Cpu)?)
}
