use candle_core::Tensor;
use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::backbone::images_to_tensor;
use crate::conditioning::SemanticContext;
use crate::error::{Error, Result};
use crate::model::ClipGuidedSam;
use crate::seg_head::{MaskPrediction, PointSource, PromptBundle, PromptMode};
use crate::semantic::{
    cosine_scores, make_dense_prompt, sample_points, sample_points_from_gt, similarity_to_map, threshold_map,
    BinaryPromptMask, PointPrompts, SimilarityMap, SimilarityScores, DEFAULT_K, DEFAULT_TAU,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Threshold on the normalized similarity map.
    pub tau: f64,
    /// Point prompts per mask.
    pub k: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, k: DEFAULT_K }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config("prompt.tau", format!("{} is outside (0, 1)", self.tau)));
        }
        if self.k == 0 {
            return Err(Error::config("prompt.k", "must be at least 1"));
        }
        Ok(())
    }
}

/// One (image, class) request.
#[derive(Clone, Copy, Debug)]
pub struct PipelineItem<'a> {
    pub image: &'a Array3<f32>,
    pub class: &'a str,
    pub gt: Option<ArrayView2<'a, u8>>,
    pub user_points: Option<&'a PointPrompts>,
    /// Seed for point sampling.
    pub seed: u64,
}

/// Batched pipeline result; `logits (B, H, W)` stays attached to the autograd graph.
pub struct BatchOutput {
    pub logits: Tensor,
    pub bundles: Vec<PromptBundle>,
    pub similarity: Vec<SimilarityMap>,
    pub prompt_masks: Vec<BinaryPromptMask>,
}

pub struct PipelineResult {
    pub prediction: MaskPrediction,
    pub bundle: PromptBundle,
    pub similarity: SimilarityMap,
    pub prompt_mask: BinaryPromptMask,
}

/// text -> VL image -> similarity -> map -> threshold -> dense prompt -> points -> injected forward -> decode.
pub fn run_batch(model: &ClipGuidedSam, items: &[PipelineItem], mode: PromptMode, cfg: &PromptConfig) -> Result<BatchOutput> {
    if items.is_empty() {
        return Err(Error::input("empty batch"));
    }
    cfg.validate()?;
    for item in items {
        model.check_class(item.class)?;
        model.check_image(item.image)?;
    }
    let config = model.config();
    let image_size = config.image_size();
    let vl_grid = config.vision_encoder.grid();

    let t = Tensor::stack(
        &items.iter().map(|it| model.class_embedding(it.class)).collect::<Result<Vec<_>>>()?,
        0,
    )?;
    let images = images_to_tensor(&items.iter().map(|it| it.image).collect::<Vec<_>>())?;
    let v = model.vision_encoder().forward(&model.vl_images(&images)?)?;
    let s = cosine_scores(&v, &t)?;
    // prompts are derived from a detached copy: thresholding is not differentiable
    let s_rows = s.detach().to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;

    let dense_res = model.prompt_encoder().dense_resolution();
    let mut bundles = Vec::with_capacity(items.len());
    let mut similarity = Vec::with_capacity(items.len());
    let mut prompt_masks = Vec::with_capacity(items.len());
    for (item, row) in items.iter().zip(s_rows) {
        let map = similarity_to_map(&SimilarityScores { values: row }, vl_grid, image_size)?;
        let mask = threshold_map(&map, cfg.tau)?;
        let dense = make_dense_prompt(&mask, dense_res);
        let (points, source) = match mode {
            PromptMode::SemiAutomatic => {
                let p = sample_points(&mask, cfg.k, item.seed, &map)?;
                let src = if p.fallback { PointSource::SimilarityFallback } else { PointSource::SimilarityMask };
                (p, src)
            }
            PromptMode::Manual => match (item.user_points, item.gt) {
                (Some(p), _) => {
                    if p.points.is_empty() {
                        return Err(Error::input("manual mode needs at least one point"));
                    }
                    (p.clone(), PointSource::UserClicks)
                }
                (None, Some(gt)) => (sample_points_from_gt(gt, cfg.k, item.seed)?, PointSource::GroundTruth),
                (None, None) => {
                    return Err(Error::input("manual mode requires ground truth or user points"));
                }
            },
        };
        points.check_bounds(image_size.0, image_size.1)?;
        bundles.push(PromptBundle { points, dense: Some(dense), mode, source });
        similarity.push(map);
        prompt_masks.push(mask);
    }

    let ctx = SemanticContext::new(&v, &s, &t, vl_grid, model.modalities())?;
    let feats = model.seg_encoder().forward(&images, Some(&ctx))?;
    let (bsz, gh, gw, d) = feats.dims4()?;
    let feats = feats.reshape((bsz, gh * gw, d))?;
    let sparse = model
        .prompt_encoder()
        .encode_points(&bundles.iter().map(|b| &b.points).collect::<Vec<_>>())?;
    let dense = model
        .prompt_encoder()
        .encode_dense(&bundles.iter().map(|b| b.dense.as_ref()).collect::<Vec<_>>())?;
    let pe = model.prompt_encoder().dense_pe()?;
    let logits = model.mask_decoder().forward(&feats, &pe, &sparse, &dense)?;
    Ok(BatchOutput { logits, bundles, similarity, prompt_masks })
}

pub fn run_mode_pipeline(
    model: &ClipGuidedSam,
    item: &PipelineItem,
    mode: PromptMode,
    cfg: &PromptConfig,
) -> Result<PipelineResult> {
    let out = run_batch(model, std::slice::from_ref(item), mode, cfg)?;
    let logits = out.logits.squeeze(0)?.detach();
    let (h, w) = logits.dims2()?;
    let logits = Array2::from_shape_vec((h, w), logits.flatten_all()?.to_vec1::<f32>()?).expect("logit shape");
    Ok(PipelineResult {
        prediction: MaskPrediction { logits },
        bundle: out.bundles.into_iter().next().expect("one bundle"),
        similarity: out.similarity.into_iter().next().expect("one map"),
        prompt_mask: out.prompt_masks.into_iter().next().expect("one mask"),
    })
}

/// Batch of prediction logits as `(H, W)` arrays.
pub fn logits_to_arrays(logits: &Tensor) -> Result<Vec<Array2<f32>>> {
    let (b, h, w) = logits.dims3()?;
    let flat = logits.detach().flatten_all()?.to_vec1::<f32>()?;
    Ok((0..b)
        .map(|i| Array2::from_shape_vec((h, w), flat[i * h * w..(i + 1) * h * w].to_vec()).expect("logit shape"))
        .collect())
}
