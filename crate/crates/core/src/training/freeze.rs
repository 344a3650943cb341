use std::collections::{BTreeMap, BTreeSet};

use candle_core::Var;
use serde::{Deserialize, Serialize};

use crate::backbone::{count_parameters, ParamReport};
use crate::conditioning::BudgetPlan;
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    SegBackbone,
    Adapters,
    PromptEncoder,
    MaskDecoder,
    /// Attention (qkv and output projection) of a vision-encoder block.
    VisionAttention,
    /// Every other vision-encoder weight: embeddings, norms, MLPs, projection.
    VisionFrozen,
    TextEncoder,
}

/// Group of a parameter name, plus the vision block index for attention weights.
pub fn classify(name: &str) -> Result<(ParamGroup, Option<usize>)> {
    if name.starts_with("clip.text.") {
        return Ok((ParamGroup::TextEncoder, None));
    }
    if let Some(rest) = name.strip_prefix("clip.visual.") {
        if let Some(rest) = rest.strip_prefix("blocks.") {
            let mut it = rest.splitn(2, '.');
            let idx = it.next().and_then(|i| i.parse::<usize>().ok());
            if let (Some(idx), Some(tail)) = (idx, it.next()) {
                if tail.starts_with("attn.") {
                    return Ok((ParamGroup::VisionAttention, Some(idx)));
                }
            }
        }
        return Ok((ParamGroup::VisionFrozen, None));
    }
    if name.starts_with("sam.image_encoder.") {
        if crate::backbone::is_adapter(name) {
            return Ok((ParamGroup::Adapters, None));
        }
        return Ok((ParamGroup::SegBackbone, None));
    }
    if name.starts_with("sam.prompt_encoder.") {
        return Ok((ParamGroup::PromptEncoder, None));
    }
    if name.starts_with("sam.mask_decoder.") {
        return Ok((ParamGroup::MaskDecoder, None));
    }
    Err(Error::config("freeze_policy", format!("parameter '{name}' belongs to no group")))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub trainable: BTreeSet<ParamGroup>,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self {
            trainable: [
                ParamGroup::PromptEncoder,
                ParamGroup::MaskDecoder,
                ParamGroup::Adapters,
                ParamGroup::VisionAttention,
            ]
            .into_iter()
            .collect(),
        }
    }
}

impl FreezePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.trainable.contains(&ParamGroup::TextEncoder) {
            return Err(Error::config("freeze_policy.trainable", "the text encoder is always frozen"));
        }
        Ok(())
    }

    /// Buffers are never trainable; vision attention only inside the top-C blocks.
    pub fn is_trainable(&self, name: &str, kind: ParamKind, plan: &BudgetPlan) -> Result<bool> {
        let (group, block) = classify(name)?;
        if kind == ParamKind::Buffer || !self.trainable.contains(&group) {
            return Ok(false);
        }
        Ok(match (group, block) {
            (ParamGroup::VisionAttention, Some(i)) => plan.vision_attention_trainable(i),
            _ => true,
        })
    }
}

pub struct TrainableSet {
    /// Trainable parameter names per group.
    pub groups: BTreeMap<ParamGroup, Vec<String>>,
    pub frozen: Vec<String>,
    pub vars: Vec<(String, Var)>,
    pub report: ParamReport,
}

impl TrainableSet {
    pub fn names(&self) -> BTreeSet<String> {
        self.vars.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.iter().any(|(n, _)| n == name)
    }
}

/// Partitions every parameter of `store`; unknown names are a configuration error.
pub fn build_trainable_set(store: &ParamStore, policy: &FreezePolicy, plan: &BudgetPlan) -> Result<TrainableSet> {
    policy.validate()?;
    let mut groups: BTreeMap<ParamGroup, Vec<String>> = BTreeMap::new();
    let mut frozen = Vec::new();
    let mut vars = Vec::new();
    let mut flags = BTreeMap::new();
    for (name, var, kind) in store.vars() {
        let trainable = policy.is_trainable(&name, kind, plan)?;
        flags.insert(name.clone(), trainable);
        if trainable {
            groups.entry(classify(&name)?.0).or_default().push(name.clone());
            vars.push((name, var));
        } else {
            frozen.push(name);
        }
    }
    if store.is_shape_only() {
        for (name, _, kind) in store.shapes() {
            let trainable = policy.is_trainable(&name, kind, plan)?;
            if trainable {
                groups.entry(classify(&name)?.0).or_default().push(name.clone());
            } else {
                frozen.push(name.clone());
            }
            flags.insert(name, trainable);
        }
    }
    let report = count_parameters(store, |n| flags.get(n).copied().unwrap_or(false));
    Ok(TrainableSet { groups, frozen, vars, report })
}
