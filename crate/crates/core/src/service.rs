//! Run configuration files, mask run-length encoding and the request handler
//! behind the HTTP endpoint. The transport itself lives in the binary.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClipGuidedSam, ModelConfig};
use crate::resize::{nearest_index, resize_bilinear, resize_nearest};
use crate::seg_head::{MaskPrediction, PointSource, PromptMode};
use crate::semantic::{Point, PointPrompts};
use crate::training::{run_mode_pipeline, PipelineItem, PromptConfig, TrainConfig};

/// Everything a `train` run needs; written unchanged into the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "ModelConfig::toy")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Dataset directory, manifest file or split manifest used for training.
    pub train_data: PathBuf,
    /// Validation data in the same forms; optional.
    #[serde(default)]
    pub val_data: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::config(if field == "." { "<root>".to_string() } else { field }, e.inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.train.architecture(&self.model)?;
        if self.train_data.as_os_str().is_empty() {
            return Err(Error::config("train_data", "path is empty"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "path is empty"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Row-major run lengths alternating background and foreground, starting with
/// background (a leading zero when the first pixel is foreground).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
}

pub fn rle_encode(mask: ArrayView2<u8>) -> Rle {
    let (height, width) = mask.dim();
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0u32;
    for &v in mask.iter() {
        let v = u8::from(v != 0);
        if v != current {
            counts.push(run);
            run = 0;
            current = v;
        }
        run += 1;
    }
    counts.push(run);
    Rle { height, width, counts }
}

pub fn rle_decode(rle: &Rle) -> Result<Array2<u8>> {
    let total: u64 = rle.counts.iter().map(|&c| u64::from(c)).sum();
    if total != (rle.height * rle.width) as u64 {
        return Err(Error::input(format!("run lengths sum to {total}, expected {}", rle.height * rle.width)));
    }
    let mut out = Vec::with_capacity(rle.height * rle.width);
    for (i, &c) in rle.counts.iter().enumerate() {
        out.extend(std::iter::repeat_n((i % 2) as u8, c as usize));
    }
    Ok(Array2::from_shape_vec((rle.height, rle.width), out).expect("run lengths match dims"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    /// Base-64 PNG.
    pub image: String,
    pub class: String,
    /// `[row, col]` clicks in image pixels; used in manual mode only.
    #[serde(default)]
    pub points: Vec<[usize; 2]>,
    #[serde(default = "default_mode")]
    pub mode: PromptMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_mode() -> PromptMode {
    PromptMode::SemiAutomatic
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub mask: Rle,
    /// Thresholded similarity map at image resolution.
    pub prompt_mask: Rle,
    /// Base-64 8-bit grayscale PNG of the normalized similarity map, `THUMBNAIL` pixels square.
    pub similarity: String,
    /// Points fed to the prompt encoder, `[row, col]` in image pixels.
    pub points: Vec<[usize; 2]>,
    pub point_source: PointSource,
    pub fallback: bool,
    pub mode: PromptMode,
    pub class: String,
    pub model: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassesResponse {
    pub classes: Vec<String>,
    pub template: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceError {
    #[serde(skip)]
    pub status: u16,
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vec<String>>,
}

impl ServiceError {
    fn bad_request(msg: impl Into<String>) -> Self {
        Self { status: 400, error: msg.into(), vocabulary: None }
    }
}

impl From<Error> for ServiceError {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownClass { ref class, ref vocabulary } => {
                Self { status: 422, error: format!("unknown class `{class}`"), vocabulary: Some(vocabulary.clone()) }
            }
            Error::Input(_) | Error::Config { .. } => Self::bad_request(e.to_string()),
            other => Self { status: 500, error: other.to_string(), vocabulary: None },
        }
    }
}

pub const THUMBNAIL: usize = 64;

/// Stateless request handler over a read-only model.
pub struct Segmenter {
    model: ClipGuidedSam,
    model_id: String,
    prompt: PromptConfig,
}

impl Segmenter {
    pub fn new(model: ClipGuidedSam, model_id: impl Into<String>, prompt: PromptConfig) -> Result<Self> {
        prompt.validate()?;
        for c in model.classes().to_vec() {
            model.class_embedding(&c)?;
        }
        Ok(Self { model, model_id: model_id.into(), prompt })
    }

    pub fn model(&self) -> &ClipGuidedSam {
        &self.model
    }

    pub fn classes(&self) -> ClassesResponse {
        ClassesResponse { classes: self.model.classes().to_vec(), template: self.model.config().template.clone() }
    }

    pub fn health(&self) -> HealthResponse {
        HealthResponse { status: "ok".into(), model: self.model_id.clone() }
    }

    pub fn handle_segment(&self, req: &SegmentRequest) -> std::result::Result<SegmentResponse, ServiceError> {
        self.model.check_class(&req.class)?;
        let image = decode_png(&req.image)?;
        let (h, w, _) = image.dim();
        let (mh, mw) = self.model.config().image_size();
        for p in &req.points {
            if p[0] >= h || p[1] >= w {
                return Err(ServiceError::bad_request(format!("point {p:?} lies outside the {h}x{w} image")));
            }
        }
        if req.mode == PromptMode::Manual && req.points.is_empty() {
            return Err(ServiceError::bad_request("manual mode needs at least one point"));
        }
        let resized = if (h, w) == (mh, mw) { image } else { resize_image(&image, (mh, mw)) };
        let user = PointPrompts {
            points: req
                .points
                .iter()
                .map(|p| Point::positive(scale_index(p[0], h, mh), scale_index(p[1], w, mw)))
                .collect(),
            fallback: false,
        };
        let item = PipelineItem {
            image: &resized,
            class: &req.class,
            gt: None,
            user_points: (req.mode == PromptMode::Manual).then_some(&user),
            seed: req.seed,
        };
        let res = run_mode_pipeline(&self.model, &item, req.mode, &self.prompt)?;
        let probs = res.prediction.probabilities();
        let probs = if (h, w) == (mh, mw) { probs } else { resize_bilinear(probs.view(), (h, w)) };
        let mask = probs.mapv(|p| u8::from(p >= 0.5));
        let points = if req.mode == PromptMode::Manual {
            req.points.clone()
        } else {
            res.bundle
                .points
                .points
                .iter()
                .map(|p| [scale_index(p.row, mh, h), scale_index(p.col, mw, w)])
                .collect()
        };
        let thumb = resize_bilinear(res.similarity.values.view(), (THUMBNAIL, THUMBNAIL));
        Ok(SegmentResponse {
            mask: rle_encode(mask.view()),
            prompt_mask: rle_encode(resize_nearest(res.prompt_mask.values.view(), (h, w)).view()),
            similarity: encode_gray_png(&thumb.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))?,
            points,
            point_source: res.bundle.source,
            fallback: res.bundle.points.fallback,
            mode: req.mode,
            class: req.class.clone(),
            model: self.model_id.clone(),
        })
    }

    /// Probability map for an in-memory image, bypassing the transport encoding.
    pub fn predict(&self, image: &Array3<f32>, class: &str, mode: PromptMode, points: Option<&PointPrompts>, seed: u64) -> Result<MaskPrediction> {
        let item = PipelineItem { image, class, gt: None, user_points: points, seed };
        Ok(run_mode_pipeline(&self.model, &item, mode, &self.prompt)?.prediction)
    }
}

/// Pixel `i` of an axis of length `from` mapped to the axis of length `to`.
fn scale_index(i: usize, from: usize, to: usize) -> usize {
    if from == to {
        i
    } else {
        nearest_index(to, from, i).min(to - 1)
    }
}

fn resize_image(image: &Array3<f32>, out: (usize, usize)) -> Array3<f32> {
    let mut res = Array3::zeros((out.0, out.1, 3));
    for c in 0..3 {
        let ch = image.index_axis(ndarray::Axis(2), c).mapv(f64::from);
        let r = resize_bilinear(ch.view(), out);
        res.index_axis_mut(ndarray::Axis(2), c).assign(&r.mapv(|v| v.clamp(0.0, 1.0) as f32));
    }
    res
}

pub fn decode_png(b64: &str) -> std::result::Result<Array3<f32>, ServiceError> {
    let bytes = B64.decode(b64.trim()).map_err(|e| ServiceError::bad_request(format!("image is not base-64: {e}")))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| ServiceError::bad_request(format!("image is not a PNG: {e}")))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(ServiceError::bad_request("image is empty"));
    }
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect())
        .expect("rgb buffer shape"))
}

pub fn encode_png(image: &Array3<f32>) -> Result<String> {
    let (h, w, _) = image.dim();
    let raw: Vec<u8> = image.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("rgb buffer size");
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| Error::Internal(e.to_string()))?;
    Ok(B64.encode(buf.into_inner()))
}

fn encode_gray_png(values: &Array2<u8>) -> Result<String> {
    let (h, w) = values.dim();
    let img = image::GrayImage::from_raw(w as u32, h as u32, values.iter().copied().collect()).expect("gray buffer size");
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| Error::Internal(e.to_string()))?;
    Ok(B64.encode(buf.into_inner()))
}
