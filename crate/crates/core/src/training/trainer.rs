use std::collections::BTreeMap;

use candle_core::{Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::freeze::{build_trainable_set, FreezePolicy, ParamGroup, TrainableSet};
use super::loss::{segmentation_loss, LossSwitches, LossValues};
use super::pipeline::{run_batch, PipelineItem, PromptConfig};
use crate::backbone::images_to_tensor;
use crate::conditioning::Modalities;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::evaluation::{miou_of, predict, sample_items, EvalConfig};
use crate::model::{Architecture, ClipGuidedSam, ModelConfig};
use crate::params::{ParamStore, Tracking};
use crate::resize::resize_nearest;
use crate::rng::{derive_seed, substream};
use crate::seg_head::PromptMode;
use crate::semantic::cosine_scores;

/// Co-adaptation budget; `None` means every block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    /// Vision-encoder blocks with trainable attention.
    pub c: Option<usize>,
    /// Segmentation blocks with a semantic adapter.
    pub s: Option<usize>,
    #[serde(default = "yes")]
    pub regular_adapters: bool,
}

fn yes() -> bool {
    true
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self { c: None, s: None, regular_adapters: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: PromptMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossSwitches,
    pub budget: BudgetConfig,
    pub modalities: Modalities,
    pub tau: f64,
    pub k: usize,
    /// Probability threshold for validation masks.
    pub eval_threshold: f64,
    /// Epochs of vision-encoder-only training on similarity-mask supervision before joint training.
    pub prefinetune_clip_epochs: usize,
    pub freeze: FreezePolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let prompt = PromptConfig::default();
        Self {
            mode: PromptMode::SemiAutomatic,
            epochs: 10,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 1e-4,
            seed: 0,
            loss: LossSwitches::ALL,
            budget: BudgetConfig::default(),
            modalities: Modalities::FULL,
            tau: prompt.tau,
            k: prompt.k,
            eval_threshold: 0.5,
            prefinetune_clip_epochs: 0,
            freeze: FreezePolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn prompt(&self) -> PromptConfig {
        PromptConfig { tau: self.tau, k: self.k }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("train.lr", format!("{} is not a positive number", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be finite and non-negative"));
        }
        if !(self.eval_threshold > 0.0 && self.eval_threshold < 1.0) {
            return Err(Error::config("train.eval_threshold", "must lie in (0, 1)"));
        }
        self.loss.validate()?;
        self.prompt().validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::config(field.replace("prompt.", "train."), reason),
            other => other,
        })?;
        self.freeze.validate()
    }

    pub fn architecture(&self, model: &ModelConfig) -> Result<Architecture> {
        let c = self.budget.c.unwrap_or(model.vision_encoder.depth);
        let s = self.budget.s.unwrap_or(model.seg_encoder.depth);
        Ok(Architecture { plan: model.budget(c, s, self.budget.regular_adapters)?, modalities: self.modalities })
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig { prompt: self.prompt(), threshold: self.eval_threshold, seed: self.seed, batch_size: self.batch_size }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `"prefinetune"` for the vision-only stage, `"joint"` otherwise.
    pub stage: String,
    /// Mean over batches.
    pub loss: LossValues,
    pub val_miou: Option<f64>,
    /// Learning rate of the last step.
    pub lr: f64,
}

pub struct TrainOutcome {
    /// Weights of the best validation epoch (the last epoch without a validation set).
    pub model: ClipGuidedSam,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_miou: Option<f64>,
    pub trainable: TrainableSet,
}

fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

fn gt_tensor(masks: &[ndarray::ArrayView2<u8>]) -> Result<Tensor> {
    let (h, w) = masks[0].dim();
    let data: Vec<f32> = masks.iter().flat_map(|m| m.iter().map(|&v| f32::from(v))).collect();
    Ok(Tensor::from_vec(data, (masks.len(), h, w), &candle_core::Device::Cpu)?)
}

fn snapshot(vars: &[(String, Var)]) -> Result<Vec<Tensor>> {
    vars.iter().map(|(_, v)| Ok(v.as_tensor().copy()?)).collect()
}

fn restore(vars: &[(String, Var)], values: &[Tensor]) -> Result<()> {
    for ((_, v), t) in vars.iter().zip(values) {
        v.set(t)?;
    }
    Ok(())
}

fn check_finite(v: &LossValues, epoch: usize, ids: Vec<usize>) -> Result<()> {
    if v.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NanLoss { epoch, sample_ids: ids, bce: v.bce, dice: v.dice, iou: v.iou })
    }
}

fn mean_values(acc: &[LossValues]) -> LossValues {
    let n = acc.len().max(1) as f64;
    let sum = |f: fn(&LossValues) -> f64| acc.iter().map(f).sum::<f64>() / n;
    LossValues { total: sum(|v| v.total), bce: sum(|v| v.bce), dice: sum(|v| v.dice), iou: sum(|v| v.iou) }
}

fn optimizer(vars: &[(String, Var)], cfg: &TrainConfig) -> Result<AdamW> {
    let params = ParamsAdamW { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() };
    Ok(AdamW::new(vars.iter().map(|(_, v)| v.clone()).collect(), params)?)
}

/// Trains a freshly initialized model. `on_epoch` sees each record as soon as it is complete.
pub fn train(
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let arch = cfg.architecture(model_config)?;
    let store = ParamStore::new(derive_seed(cfg.seed, "init"));
    let model = ClipGuidedSam::build(model_config, &arch, &store, Tracking::None)?;
    train_model(model, cfg, train_set, val_set, on_epoch)
}

/// Continues training the weights of `model` (its architecture is kept).
pub fn train_model(
    model: ClipGuidedSam,
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    let trainable = build_trainable_set(model.store(), &cfg.freeze, model.plan())?;
    let names = trainable.names();
    let tracked = model.with_tracking(Tracking::Select(std::sync::Arc::new(move |n: &str| names.contains(n))))?;
    let items = sample_items(train_set, tracked.classes());
    if items.is_empty() {
        return Err(Error::input("no training sample contains a vocabulary class"));
    }
    let prompt = cfg.prompt();
    let mut log = Vec::with_capacity(cfg.epochs + cfg.prefinetune_clip_epochs);

    if cfg.prefinetune_clip_epochs > 0 {
        let vision: Vec<(String, Var)> = trainable
            .vars
            .iter()
            .filter(|(n, _)| trainable.groups.get(&ParamGroup::VisionAttention).is_some_and(|g| g.contains(n)))
            .cloned()
            .collect();
        if vision.is_empty() {
            return Err(Error::config("train.prefinetune_clip_epochs", "needs trainable vision attention (C > 0)"));
        }
        let mut opt = optimizer(&vision, cfg)?;
        for epoch in 1..=cfg.prefinetune_clip_epochs {
            let rec = similarity_epoch(&tracked, &mut opt, cfg, train_set, &items, epoch)?;
            on_epoch(&rec);
            log.push(rec);
        }
    }

    let mut opt = optimizer(&trainable.vars, cfg)?;
    let steps_per_epoch = items.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut substream(cfg.seed, &format!("shuffle/{epoch}")));
        let mut acc = Vec::with_capacity(steps_per_epoch);
        let mut lr = cfg.lr;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PipelineItem> = chunk
                .iter()
                .map(|&j| {
                    let (i, class) = items[j];
                    let s = &train_set[i];
                    PipelineItem {
                        image: &s.image,
                        class,
                        gt: Some(s.masks[class].view()),
                        user_points: None,
                        seed: derive_seed(cfg.seed, &format!("sampling/{epoch}/{}/{class}", s.id)),
                    }
                })
                .collect();
            let out = run_batch(&tracked, &batch, cfg.mode, &prompt)?;
            let gt = gt_tensor(&batch.iter().map(|b| b.gt.expect("training item has gt")).collect::<Vec<_>>())?;
            let loss = segmentation_loss(&out.logits, &gt, cfg.loss)?;
            let values = loss.values()?;
            check_finite(&values, epoch, chunk.iter().map(|&j| items[j].0).collect())?;
            lr = cosine_lr(cfg.lr, step, total_steps);
            opt.set_learning_rate(lr);
            opt.backward_step(&loss.total)?;
            step += 1;
            acc.push(values);
        }
        let val_miou = if val_set.is_empty() {
            None
        } else {
            let inference = tracked.with_tracking(Tracking::None)?;
            let preds = predict(&inference, val_set, cfg.mode, &cfg.eval_config())?;
            Some(miou_of(&preds, val_set)?)
        };
        if let Some(m) = val_miou {
            if best.as_ref().is_none_or(|(b, _, _)| m > *b) {
                best = Some((m, epoch, snapshot(&trainable.vars)?));
            }
        }
        let rec = EpochRecord { epoch, stage: "joint".into(), loss: mean_values(&acc), val_miou, lr };
        tracing::info!(epoch, loss = rec.loss.total, val_miou = ?rec.val_miou, "epoch done");
        on_epoch(&rec);
        log.push(rec);
    }

    let (best_epoch, best_val_miou) = match best {
        Some((m, e, values)) => {
            restore(&trainable.vars, &values)?;
            (e, Some(m))
        }
        None => (cfg.epochs, None),
    };
    Ok(TrainOutcome { model: tracked.with_tracking(Tracking::None)?, log, best_epoch, best_val_miou, trainable })
}

/// Vision-only epoch: the similarity scores, scaled into logits, are supervised by the
/// ground truth resampled to the patch grid.
fn similarity_epoch(
    model: &ClipGuidedSam,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    samples: &[Sample],
    items: &[(usize, &str)],
    epoch: usize,
) -> Result<EpochRecord> {
    const SCALE: f64 = 10.0;
    let grid = model.config().vision_encoder.grid();
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut substream(cfg.seed, &format!("prefinetune/{epoch}")));
    let mut acc = Vec::new();
    for chunk in order.chunks(cfg.batch_size) {
        let images: Vec<_> = chunk.iter().map(|&j| &samples[items[j].0].image).collect();
        let t = Tensor::stack(
            &chunk.iter().map(|&j| model.class_embedding(items[j].1)).collect::<Result<Vec<_>>>()?,
            0,
        )?;
        let x = model.vl_images(&images_to_tensor(&images)?)?;
        let s = cosine_scores(&model.vision_encoder().forward(&x)?, &t)?;
        let logits = (s.reshape((chunk.len(), grid.0, grid.1))? * SCALE)?;
        let small: Vec<_> = chunk
            .iter()
            .map(|&j| resize_nearest(samples[items[j].0].masks[items[j].1].view(), grid))
            .collect();
        let gt = gt_tensor(&small.iter().map(|m| m.view()).collect::<Vec<_>>())?.to_dtype(logits.dtype())?;
        let loss = segmentation_loss(&logits, &gt, cfg.loss)?;
        let values = loss.values()?;
        check_finite(&values, epoch, chunk.iter().map(|&j| items[j].0).collect())?;
        opt.backward_step(&loss.total)?;
        acc.push(values);
    }
    Ok(EpochRecord { epoch, stage: "prefinetune".into(), loss: mean_values(&acc), val_miou: None, lr: cfg.lr })
}

/// Per-group parameter deltas between two snapshots, used by freezing checks.
pub fn changed_parameters(
    before: &BTreeMap<String, Vec<f32>>,
    after: &BTreeMap<String, Vec<f32>>,
) -> BTreeMap<String, bool> {
    before
        .iter()
        .map(|(n, b)| {
            let changed = after.get(n).is_none_or(|a| a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()));
            (n.clone(), changed)
        })
        .collect()
}

/// Parameter counts of the architecture `cfg` trains, without allocating weights.
pub fn parameter_report(model: &ModelConfig, cfg: &TrainConfig) -> Result<crate::backbone::ParamReport> {
    let arch = cfg.architecture(model)?;
    let store = ParamStore::shape_only();
    ClipGuidedSam::build(model, &arch, &store, Tracking::None)?;
    Ok(build_trainable_set(&store, &cfg.freeze, &arch.plan)?.report)
}
