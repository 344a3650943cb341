//! Segmentation metrics and the dataset-level evaluation driver.

mod metrics;

pub use metrics::{
    binary_iou, e_measure, intersection_union, mae, miou_protocol, s_measure, weighted_fbeta, IouAccumulator,
    MiouResult,
};

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::ClipGuidedSam;
use crate::rng::derive_seed;
use crate::seg_head::{MaskPrediction, PointSource, PromptMode};
use crate::training::{logits_to_arrays, run_batch, PipelineItem, PromptConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub mode: PromptMode,
    pub per_class_iou: BTreeMap<String, f64>,
    pub miou: f64,
    pub mae: f64,
    pub s_alpha: f64,
    pub e_phi: f64,
    pub f_beta_w: f64,
    /// Evaluated (image, class) pairs.
    pub sample_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub prompt: PromptConfig,
    /// Probability threshold for binary masks.
    pub threshold: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { prompt: PromptConfig::default(), threshold: 0.5, seed: 0, batch_size: 8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePrediction {
    pub sample_id: String,
    pub class: String,
    pub probabilities: Array2<f64>,
    pub binary: Array2<u8>,
    pub source: PointSource,
}

pub struct EvalOutput {
    pub record: MetricsRecord,
    pub predictions: Vec<SamplePrediction>,
}

/// One `(sample index, class)` per present class, in vocabulary order.
pub fn sample_items<'a>(samples: &'a [Sample], classes: &[String]) -> Vec<(usize, &'a str)> {
    let mut items = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        for c in classes {
            if let Some((k, _)) = s.masks.get_key_value(c) {
                items.push((i, k.as_str()));
            }
        }
    }
    items
}

/// Runs the mode pipeline on every present (image, class) pair.
pub fn predict(model: &ClipGuidedSam, samples: &[Sample], mode: PromptMode, cfg: &EvalConfig) -> Result<Vec<SamplePrediction>> {
    let items = sample_items(samples, model.classes());
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(cfg.batch_size.max(1)) {
        let batch: Vec<PipelineItem> = chunk
            .iter()
            .map(|&(i, class)| {
                let s = &samples[i];
                PipelineItem {
                    image: &s.image,
                    class,
                    gt: Some(s.masks[class].view()),
                    user_points: None,
                    seed: derive_seed(cfg.seed, &format!("eval/{}/{class}", s.id)),
                }
            })
            .collect();
        let res = run_batch(model, &batch, mode, &cfg.prompt)?;
        for ((logits, bundle), &(i, class)) in logits_to_arrays(&res.logits)?.into_iter().zip(res.bundles).zip(chunk) {
            let pred = MaskPrediction { logits };
            out.push(SamplePrediction {
                sample_id: samples[i].id.clone(),
                class: class.to_string(),
                probabilities: pred.probabilities(),
                binary: pred.binary(cfg.threshold),
                source: bundle.source,
            });
        }
    }
    Ok(out)
}

/// Metrics over predictions; each prediction must match a ground-truth mask in `samples`.
pub fn aggregate(predictions: &[SamplePrediction], samples: &[Sample], mode: PromptMode) -> Result<MetricsRecord> {
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut acc = IouAccumulator::default();
    let (mut m, mut s, mut e, mut f) = (0.0, 0.0, 0.0, 0.0);
    for p in predictions {
        let gt = by_id
            .get(p.sample_id.as_str())
            .and_then(|smp| smp.masks.get(&p.class))
            .ok_or_else(|| Error::Eval(format!("no ground truth for {} / {}", p.sample_id, p.class)))?;
        acc.add(&p.class, p.binary.view(), gt.view())?;
        m += mae(p.probabilities.view(), gt.view())?;
        s += s_measure(p.probabilities.view(), gt.view())?;
        e += e_measure(p.probabilities.view(), gt.view())?;
        f += weighted_fbeta(p.probabilities.view(), gt.view())?;
    }
    let n = predictions.len().max(1) as f64;
    let miou = acc.finish();
    Ok(MetricsRecord {
        mode,
        per_class_iou: miou.per_class,
        miou: miou.miou,
        mae: m / n,
        s_alpha: s / n,
        e_phi: e / n,
        f_beta_w: f / n,
        sample_count: predictions.len(),
    })
}

/// mIoU only, skipping the structure metrics (used for per-epoch validation).
pub fn miou_of(predictions: &[SamplePrediction], samples: &[Sample]) -> Result<f64> {
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut acc = IouAccumulator::default();
    for p in predictions {
        let gt = by_id
            .get(p.sample_id.as_str())
            .and_then(|smp| smp.masks.get(&p.class))
            .ok_or_else(|| Error::Eval(format!("no ground truth for {} / {}", p.sample_id, p.class)))?;
        acc.add(&p.class, p.binary.view(), gt.view())?;
    }
    Ok(acc.finish().miou)
}

pub fn evaluate(model: &ClipGuidedSam, samples: &[Sample], mode: PromptMode, cfg: &EvalConfig) -> Result<EvalOutput> {
    let predictions = predict(model, samples, mode, cfg)?;
    let record = aggregate(&predictions, samples, mode)?;
    Ok(EvalOutput { record, predictions })
}

/// Writes `<dir>/<class>/<id>.png` binary masks (0/255).
pub fn dump_predictions(dir: &Path, predictions: &[SamplePrediction]) -> Result<()> {
    for p in predictions {
        let sub = dir.join(&p.class);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let (h, w) = p.binary.dim();
        let raw: Vec<u8> = p.binary.iter().map(|&v| v * 255).collect();
        let path = sub.join(format!("{}.png", p.sample_id));
        image::GrayImage::from_raw(w as u32, h as u32, raw)
            .expect("mask buffer size")
            .save(&path)
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// mIoU recomputed from a directory written by [`dump_predictions`].
pub fn miou_from_dump(dir: &Path, samples: &[Sample], classes: &[String]) -> Result<MiouResult> {
    let mut preds = BTreeMap::new();
    let mut gts = BTreeMap::new();
    for s in samples {
        for (class, gt) in &s.masks {
            if !classes.contains(class) {
                continue;
            }
            let path = dir.join(class).join(format!("{}.png", s.id));
            if path.exists() {
                let img = image::open(&path).map_err(|e| Error::io(&path, e))?.to_luma8();
                let (w, h) = img.dimensions();
                let arr = Array2::from_shape_vec((h as usize, w as usize), img.into_raw().into_iter().map(|v| u8::from(v > 127)).collect())
                    .expect("mask shape");
                preds.insert((s.id.clone(), class.clone()), arr);
            }
            gts.insert((s.id.clone(), class.clone()), gt.clone());
        }
    }
    miou_protocol(&preds, &gts, classes)
}

impl MetricsRecord {
    pub fn summary_table(&self) -> String {
        let mut out = format!("mode: {}  pairs: {}\n", self.mode, self.sample_count);
        for (c, v) in &self.per_class_iou {
            out.push_str(&format!("  IoU[{c}] {:>8.4}\n", v));
        }
        out.push_str(&format!(
            "  mIoU {:.4}  MAE {:.4}  S_alpha {:.4}  E_phi {:.4}  F_beta_w {:.4}\n",
            self.miou, self.mae, self.s_alpha, self.e_phi, self.f_beta_w
        ));
        out
    }
}
