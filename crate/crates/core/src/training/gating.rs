use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::freeze::{classify, ParamGroup};
use super::loss::{segmentation_loss, LossSwitches};
use super::pipeline::{run_batch, PipelineItem, PromptConfig};
use crate::error::{Error, Result};
use crate::model::ClipGuidedSam;
use crate::params::{ParamKind, Tracking};
use crate::seg_head::PromptMode;

/// Gradient norms after one backward pass with every weight tracked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatingReport {
    pub groups: BTreeMap<ParamGroup, f64>,
    /// Over every vision-encoder weight.
    pub vision_total: f64,
    /// Attention gradient norm per vision block.
    pub vision_blocks: Vec<f64>,
    pub text: f64,
}

pub fn check_gradient_gating(
    model: &ClipGuidedSam,
    items: &[PipelineItem],
    mode: PromptMode,
    prompt: &PromptConfig,
) -> Result<GatingReport> {
    let gt = items.iter().map(|it| it.gt.ok_or_else(|| Error::input("gating check needs ground truth"))).collect::<Result<Vec<_>>>()?;
    let probe = model.with_tracking(Tracking::All)?;
    let out = run_batch(&probe, items, mode, prompt)?;
    let (h, w) = gt[0].dim();
    let data: Vec<f32> = gt.iter().flat_map(|m| m.iter().map(|&v| f32::from(v))).collect();
    let gt = candle_core::Tensor::from_vec(data, (gt.len(), h, w), &candle_core::Device::Cpu)?;
    let loss = segmentation_loss(&out.logits, &gt, LossSwitches::ALL)?;
    let grads = loss.total.backward()?;

    let mut sq: BTreeMap<ParamGroup, f64> = BTreeMap::new();
    let mut blocks = vec![0.0; model.config().vision_encoder.depth];
    let mut vision = 0.0;
    for (name, var, kind) in model.store().vars() {
        if kind == ParamKind::Buffer {
            continue;
        }
        let (group, block) = classify(&name)?;
        let g = match grads.get(var.as_tensor()) {
            Some(g) => g.to_dtype(candle_core::DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?,
            None => 0.0,
        };
        *sq.entry(group).or_default() += g;
        if matches!(group, ParamGroup::VisionAttention | ParamGroup::VisionFrozen) {
            vision += g;
        }
        if let Some(b) = block {
            blocks[b] += g;
        }
    }
    Ok(GatingReport {
        text: sq.get(&ParamGroup::TextEncoder).copied().unwrap_or(0.0).sqrt(),
        groups: sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect(),
        vision_total: vision.sqrt(),
        vision_blocks: blocks.into_iter().map(f64::sqrt).collect(),
    })
}
