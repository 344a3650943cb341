//! The assembled model: segmentation encoder with adapters, vision-language
//! encoders, prompt encoder and mask decoder over one shared parameter store.

use std::sync::Arc;

use candle_core::Tensor;
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backbone::{
    images_to_tensor, EncoderConfig, FeatureMap, PatchEmbeddings, SegImageEncoder, TextConfig, TextEmbedding,
    TextEmbeddingCache, TextEncoder, Tokenizer, VisionEncoder, DEFAULT_TEMPLATE,
};
use crate::conditioning::{configure_budget, BudgetPlan, Modalities, SemanticContext, SemanticInputs};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Tracking};
use crate::resize::resize_tensor;
use crate::seg_head::{DecoderConfig, MaskDecoder, PromptEncoder};

pub const TOY_CLASSES: [&str; 4] = ["circle", "square", "triangle", "cross"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub seg_encoder: EncoderConfig,
    /// Channel width of the segmentation feature map, prompt embeddings and decoder.
    pub neck_dim: usize,
    pub vision_encoder: EncoderConfig,
    /// Shared vision-language embedding width `C_c`.
    pub embed_dim: usize,
    pub text_encoder: TextConfig,
    pub decoder: DecoderConfig,
    /// Adapter bottleneck ratio `r`.
    pub adapter_ratio: usize,
    pub classes: Vec<String>,
    pub template: String,
}

impl ModelConfig {
    /// Desk-scale configuration: 96x96 images on an 8x8 token grid.
    pub fn toy() -> Self {
        let enc = |depth| EncoderConfig { image_size: 96, patch_size: 12, depth, width: 32, heads: 2, mlp_ratio: 4.0 };
        Self {
            seg_encoder: enc(3),
            neck_dim: 32,
            vision_encoder: enc(3),
            embed_dim: 32,
            text_encoder: TextConfig { context_length: 16, width: 32, depth: 2, heads: 2, mlp_ratio: 4.0, vocab_size: None },
            decoder: DecoderConfig { depth: 2, heads: 2, mlp_dim: 64, attention_downsample: 2, mask_in_chans: 8 },
            adapter_ratio: 4,
            classes: TOY_CLASSES.iter().map(|s| s.to_string()).collect(),
            template: DEFAULT_TEMPLATE.into(),
        }
    }

    /// ViT-B dimensions for both image encoders and a CLIP-sized text encoder.
    pub fn vit_b() -> Self {
        let enc = |image_size| EncoderConfig { image_size, patch_size: 16, depth: 12, width: 768, heads: 12, mlp_ratio: 4.0 };
        Self {
            seg_encoder: enc(1024),
            neck_dim: 256,
            vision_encoder: enc(224),
            embed_dim: 512,
            text_encoder: TextConfig {
                context_length: 77,
                width: 512,
                depth: 12,
                heads: 8,
                mlp_ratio: 4.0,
                vocab_size: Some(49408),
            },
            decoder: DecoderConfig { depth: 2, heads: 8, mlp_dim: 2048, attention_downsample: 2, mask_in_chans: 16 },
            adapter_ratio: 4,
            classes: TOY_CLASSES.iter().map(|s| s.to_string()).collect(),
            template: DEFAULT_TEMPLATE.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.seg_encoder.validate("model.seg_encoder")?;
        self.vision_encoder.validate("model.vision_encoder")?;
        let t = &self.text_encoder;
        if t.depth == 0 || t.heads == 0 || t.width % t.heads != 0 || t.context_length < 2 {
            return Err(Error::config(
                "model.text_encoder",
                "needs depth >= 1, width divisible by heads and context_length >= 2",
            ));
        }
        self.decoder.validate(self.neck_dim)?;
        if self.neck_dim == 0 || self.embed_dim == 0 {
            return Err(Error::config("model.neck_dim", "widths must be positive"));
        }
        if self.adapter_ratio == 0 || self.adapter_ratio > self.seg_encoder.width {
            return Err(Error::config("model.adapter_ratio", "must be in 1..=seg_encoder.width"));
        }
        if self.classes.is_empty() {
            return Err(Error::config("model.classes", "vocabulary is empty"));
        }
        if self.classes.iter().any(|c| c.trim().is_empty()) {
            return Err(Error::config("model.classes", "class names must be non-empty"));
        }
        if !self.template.contains("{class}") {
            return Err(Error::config("model.template", "must contain the {class} placeholder"));
        }
        Ok(())
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.seg_encoder.image_size, self.seg_encoder.image_size)
    }

    pub fn budget(&self, c: usize, s: usize, regular_adapters: bool) -> Result<BudgetPlan> {
        configure_budget(c, s, self.vision_encoder.depth, self.seg_encoder.depth, regular_adapters)
    }

    /// Full budget: every vision block trainable, semantic adapters on every segmentation block.
    pub fn full_budget(&self) -> BudgetPlan {
        self.budget(self.vision_encoder.depth, self.seg_encoder.depth, true).expect("full budget is in range")
    }
}

/// Architecture choices that change which parameters exist or which signals flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub plan: BudgetPlan,
    pub modalities: Modalities,
}

pub struct ClipGuidedSam {
    config: ModelConfig,
    arch: Architecture,
    store: ParamStore,
    tracking: Tracking,
    seg: SegImageEncoder,
    vision: VisionEncoder,
    text: TextEncoder,
    prompt: PromptEncoder,
    decoder: MaskDecoder,
    tokenizer: Tokenizer,
    text_cache: Arc<TextEmbeddingCache>,
}

impl ClipGuidedSam {
    /// Declares (or reuses) every parameter in `store`.
    pub fn build(config: &ModelConfig, arch: &Architecture, store: &ParamStore, tracking: Tracking) -> Result<Self> {
        Self::build_with_cache(config, arch, store, tracking, Arc::new(TextEmbeddingCache::default()))
    }

    fn build_with_cache(
        config: &ModelConfig,
        arch: &Architecture,
        store: &ParamStore,
        tracking: Tracking,
        text_cache: Arc<TextEmbeddingCache>,
    ) -> Result<Self> {
        config.validate()?;
        let plan = &arch.plan;
        if plan.vision_depth != config.vision_encoder.depth || plan.seg_depth != config.seg_encoder.depth {
            return Err(Error::config("budget", "plan depths do not match the encoder configs"));
        }
        let root = store.builder(tracking.clone());
        let sam = root.pp("sam");
        let clip = root.pp("clip");
        let tokenizer = Tokenizer::new(&config.classes, &config.template);
        let grid = config.seg_encoder.grid();
        let image = config.image_size();
        Ok(Self {
            seg: SegImageEncoder::new(
                &sam.pp("image_encoder"),
                &config.seg_encoder,
                config.neck_dim,
                config.embed_dim,
                config.adapter_ratio,
                plan,
            )?,
            vision: VisionEncoder::new(&clip.pp("visual"), &config.vision_encoder, config.embed_dim)?,
            text: TextEncoder::new(&clip.pp("text"), &config.text_encoder, tokenizer.vocab_size(), config.embed_dim)?,
            prompt: PromptEncoder::new(&sam.pp("prompt_encoder"), config.neck_dim, image, grid, config.decoder.mask_in_chans)?,
            decoder: MaskDecoder::new(&sam.pp("mask_decoder"), config.neck_dim, &config.decoder, grid, image)?,
            config: config.clone(),
            arch: arch.clone(),
            store: store.clone(),
            tracking,
            tokenizer,
            text_cache,
        })
    }

    /// Fresh weights drawn from `seed`.
    pub fn new(config: &ModelConfig, arch: &Architecture, seed: u64) -> Result<Self> {
        Self::build(config, arch, &ParamStore::new(seed), Tracking::None)
    }

    /// Same weights and text cache, different gradient tracking.
    pub fn with_tracking(&self, tracking: Tracking) -> Result<Self> {
        Self::build_with_cache(&self.config, &self.arch, &self.store, tracking, self.text_cache.clone())
    }

    /// Same weights without any adapters.
    pub fn without_adapters(&self) -> Result<Self> {
        let plan = self.config.budget(self.arch.plan.c, 0, false)?;
        let arch = Architecture { plan, modalities: self.arch.modalities };
        Self::build_with_cache(&self.config, &arch, &self.store, Tracking::None, self.text_cache.clone())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn plan(&self) -> &BudgetPlan {
        &self.arch.plan
    }

    pub fn modalities(&self) -> Modalities {
        self.arch.modalities
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn tracking(&self) -> &Tracking {
        &self.tracking
    }

    pub fn seg_encoder(&self) -> &SegImageEncoder {
        &self.seg
    }

    pub fn vision_encoder(&self) -> &VisionEncoder {
        &self.vision
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn prompt_encoder(&self) -> &PromptEncoder {
        &self.prompt
    }

    pub fn mask_decoder(&self) -> &MaskDecoder {
        &self.decoder
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn text_cache(&self) -> &TextEmbeddingCache {
        &self.text_cache
    }

    pub fn classes(&self) -> &[String] {
        &self.config.classes
    }

    pub fn check_class(&self, class: &str) -> Result<()> {
        if self.config.classes.iter().any(|c| c == class) {
            Ok(())
        } else {
            Err(Error::UnknownClass { class: class.to_string(), vocabulary: self.config.classes.clone() })
        }
    }

    /// Encodes `prompt` with `template` without touching the cache, `(C_c,)`.
    pub fn encode_text_tensor(&self, prompt: &str, template: &str) -> Result<Tensor> {
        let ids = self.tokenizer.encode(prompt, template, self.config.text_encoder.context_length)?;
        self.text.forward(&ids)
    }

    /// Cached, detached embedding of a class prompt with the configured template.
    pub fn class_embedding(&self, class: &str) -> Result<Tensor> {
        self.text_cache
            .get_or_encode(class, || self.encode_text_tensor(class, &self.config.template))
    }

    pub fn encode_text(&self, prompt: &str) -> Result<TextEmbedding> {
        self.encode_text_with_template(prompt, &self.config.template.clone())
    }

    pub fn encode_text_with_template(&self, prompt: &str, template: &str) -> Result<TextEmbedding> {
        let t = if template == self.config.template {
            self.class_embedding(prompt)?
        } else {
            self.encode_text_tensor(prompt, template)?
        };
        TextEmbedding::new(Array1::from(tensor_to_f64(&t)?))
    }

    /// Resizes a `(B, H, W, 3)` batch to the vision encoder's input size when they differ.
    pub fn vl_images(&self, images: &Tensor) -> Result<Tensor> {
        let size = self.config.vision_encoder.image_size;
        let (_, h, w, _) = images.dims4()?;
        if (h, w) == (size, size) {
            return Ok(images.clone());
        }
        let x = images.permute((0, 3, 1, 2))?;
        Ok(resize_tensor(&x, (size, size))?.permute((0, 2, 3, 1))?.contiguous()?)
    }

    pub fn check_image(&self, image: &Array3<f32>) -> Result<()> {
        let (h, w) = self.config.image_size();
        let d = image.dim();
        if d != (h, w, 3) {
            return Err(Error::config("image", format!("expected {h}x{w}x3, got {}x{}x{}", d.0, d.1, d.2)));
        }
        if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::input("image values must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn encode_image_vl(&self, image: &Array3<f32>) -> Result<PatchEmbeddings> {
        self.check_image(image)?;
        let x = self.vl_images(&images_to_tensor(&[image])?)?;
        let v = self.vision.forward(&x)?.squeeze(0)?;
        let (n, c) = v.dims2()?;
        let values = Array2::from_shape_vec((n, c), tensor_to_f64(&v)?).expect("vision output shape");
        PatchEmbeddings::new(values, self.config.vision_encoder.grid())
    }

    /// Neck output for one image with the given semantic inputs.
    pub fn encode_image_seg(&self, image: &Array3<f32>, semantic: &SemanticInputs) -> Result<FeatureMap> {
        self.check_image(image)?;
        let ctx = semantic.to_context(self.arch.modalities)?;
        self.encode_image_seg_ctx(image, Some(&ctx))
    }

    pub fn encode_image_seg_ctx(&self, image: &Array3<f32>, ctx: Option<&SemanticContext>) -> Result<FeatureMap> {
        let y = self.seg.forward(&images_to_tensor(&[image])?, ctx)?.squeeze(0)?;
        let (h, w, c) = y.dims3()?;
        Ok(FeatureMap {
            values: Array3::from_shape_vec((h, w, c), tensor_to_f64(&y)?).expect("neck output shape"),
            layer_index: self.config.seg_encoder.depth,
        })
    }
}

pub(crate) fn tensor_to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?)
}
