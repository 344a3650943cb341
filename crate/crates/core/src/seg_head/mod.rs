//! Prompt encoder (points and dense mask) and a two-way-attention mask decoder
//! producing one full-resolution mask logit map per prompt.

mod decoder;
mod prompt;

pub use decoder::{DecoderConfig, MaskDecoder};
pub use prompt::PromptEncoder;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::semantic::{DensePrompt, PointPrompts};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Manual,
    SemiAutomatic,
}

impl std::str::FromStr for PromptMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.replace('-', "_").as_str() {
            "manual" => Ok(Self::Manual),
            "semi_automatic" | "semi" => Ok(Self::SemiAutomatic),
            other => Err(crate::Error::input(format!(
                "unknown mode '{other}' (expected manual or semi_automatic)"
            ))),
        }
    }
}

impl std::fmt::Display for PromptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Manual => "manual",
            Self::SemiAutomatic => "semi_automatic",
        })
    }
}

/// Where the point prompts of a bundle came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    SimilarityMask,
    SimilarityFallback,
    GroundTruth,
    UserClicks,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptBundle {
    pub points: PointPrompts,
    pub dense: Option<DensePrompt>,
    pub mode: PromptMode,
    pub source: PointSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction {
    pub logits: Array2<f32>,
}

impl MaskPrediction {
    /// Sigmoid of logits clamped to ±30, so values stay strictly inside (0, 1).
    pub fn probabilities(&self) -> Array2<f64> {
        self.logits.mapv(|z| 1.0 / (1.0 + (-(z as f64).clamp(-30.0, 30.0)).exp()))
    }

    pub fn binary(&self, threshold: f64) -> Array2<u8> {
        self.probabilities().mapv(|p| u8::from(p >= threshold))
    }
}
