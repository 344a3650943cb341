use candle_core::Tensor;

use super::EncoderConfig;
use crate::conditioning::{regular_adapter_forward, BudgetPlan, Bottleneck, SemanticAdapter, SemanticContext};
use crate::error::Result;
use crate::nn::{Activation, Conv3x3, LayerNorm, Linear, Mlp, PatchConv, SelfAttention};
use crate::params::{Init, ParamBuilder};

pub(crate) const LN_EPS: f64 = 1e-6;

/// Pre-norm transformer block with optional adapters:
///
/// `x = x + attn(n1(x)) + adapter(n1(x))`, then `x = x + mlp(n2(x)) + semantic(n2(x), U, T)`.
#[derive(Clone, Debug)]
pub struct Block {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    adapter: Option<Bottleneck>,
    semantic: Option<SemanticAdapter>,
}

impl Block {
    pub fn new(b: &ParamBuilder, width: usize, heads: usize, mlp_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&b.pp("norm1"), width, LN_EPS)?,
            attn: SelfAttention::new(&b.pp("attn"), width, heads)?,
            norm2: LayerNorm::new(&b.pp("norm2"), width, LN_EPS)?,
            mlp: Mlp::new(&b.pp("mlp"), &[width, mlp_dim, width], Activation::Gelu)?,
            adapter: None,
            semantic: None,
        })
    }

    pub fn with_adapter(mut self, b: &ParamBuilder, width: usize, ratio: usize) -> Result<Self> {
        self.adapter = Some(Bottleneck::new(&b.pp("adapter"), width, ratio)?);
        Ok(self)
    }

    pub fn with_semantic(mut self, b: &ParamBuilder, clip_dim: usize, width: usize, ratio: usize) -> Result<Self> {
        self.semantic = Some(SemanticAdapter::new(&b.pp("semantic_adapter"), clip_dim, width, ratio)?);
        Ok(self)
    }

    pub fn forward(
        &self,
        x: &Tensor,
        mask: Option<&Tensor>,
        semantic: Option<&SemanticContext>,
        grid: (usize, usize),
    ) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let mut a = self.attn.forward(&h, mask)?;
        if let Some(ad) = &self.adapter {
            a = (a + regular_adapter_forward(&h, ad)?)?;
        }
        let x = (x + a)?;
        let h = self.norm2.forward(&x)?;
        let mut m = self.mlp.forward(&h)?;
        if let Some(sa) = &self.semantic {
            let empty;
            let ctx = match semantic {
                Some(c) => c,
                None => {
                    empty = SemanticContext::empty(grid);
                    &empty
                }
            };
            m = (m + sa.forward(&h, ctx, grid)?)?;
        }
        Ok((x + m)?)
    }
}

/// Segmentation image encoder: patch embedding, learned positions, blocks and a conv neck.
///
/// Input `(B, H, W, 3)`, output `(B, H/p, W/p, neck_dim)`.
#[derive(Clone, Debug)]
pub struct SegImageEncoder {
    cfg: EncoderConfig,
    patch_embed: PatchConv,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    neck_conv1: Linear,
    neck_ln1: LayerNorm,
    neck_conv2: Conv3x3,
    neck_ln2: LayerNorm,
}

impl SegImageEncoder {
    pub fn new(
        b: &ParamBuilder,
        cfg: &EncoderConfig,
        neck_dim: usize,
        clip_dim: usize,
        adapter_ratio: usize,
        plan: &BudgetPlan,
    ) -> Result<Self> {
        let w = cfg.width;
        let blocks = (0..cfg.depth)
            .map(|i| {
                let bb = b.pp(format!("blocks.{i}"));
                let mut block = Block::new(&bb, w, cfg.heads, cfg.mlp_dim())?;
                if plan.has_regular(i) {
                    block = block.with_adapter(&bb, w, adapter_ratio)?;
                }
                if plan.has_semantic(i) {
                    block = block.with_semantic(&bb, clip_dim, w, adapter_ratio)?;
                }
                Ok(block)
            })
            .collect::<Result<Vec<_>>>()?;
        let neck = b.pp("neck");
        let neck_conv1 = {
            let nb = neck.pp("conv1");
            let weight = nb.get("weight", vec![neck_dim, w, 1, 1], Init::fan_in(w))?;
            Linear::from_tensors(weight.reshape((neck_dim, w))?, None)
        };
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed: PatchConv::new(&b.pp("patch_embed"), 3, w, cfg.patch_size, true)?,
            pos_embed: b.get("pos_embed", vec![1, cfg.tokens(), w], Init::PROJ)?,
            blocks,
            neck_conv1,
            neck_ln1: LayerNorm::new(&neck.pp("ln1"), neck_dim, LN_EPS)?,
            neck_conv2: Conv3x3::new(&neck.pp("conv2"), neck_dim, neck_dim)?,
            neck_ln2: LayerNorm::new(&neck.pp("ln2"), neck_dim, LN_EPS)?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn forward(&self, images: &Tensor, semantic: Option<&SemanticContext>) -> Result<Tensor> {
        Ok(self.forward_traced(images, semantic, false)?.0)
    }

    /// Also returns the token output of every block when `trace` is set.
    pub fn forward_traced(
        &self,
        images: &Tensor,
        semantic: Option<&SemanticContext>,
        trace: bool,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let grid = self.cfg.grid();
        let bsz = images.dims()[0];
        let x = self.patch_embed.forward(images)?;
        let mut x = x.reshape((bsz, grid.0 * grid.1, self.cfg.width))?.broadcast_add(&self.pos_embed)?;
        let mut layers = Vec::new();
        for block in &self.blocks {
            x = block.forward(&x, None, semantic, grid)?;
            if trace {
                layers.push(x.clone());
            }
        }
        let y = self.neck_ln1.forward(&self.neck_conv1.forward(&x)?)?;
        let y = y.reshape((bsz, grid.0, grid.1, ()))?;
        let y = self.neck_ln2.forward(&self.neck_conv2.forward(&y)?)?;
        Ok((y, layers))
    }
}

/// Vision-language image encoder. Output: per-patch embeddings `(B, N, C_c)`, class token discarded.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    cfg: EncoderConfig,
    conv1: PatchConv,
    class_embedding: Tensor,
    positional_embedding: Tensor,
    ln_pre: LayerNorm,
    blocks: Vec<Block>,
    ln_post: LayerNorm,
    proj: Tensor,
}

impl VisionEncoder {
    pub fn new(b: &ParamBuilder, cfg: &EncoderConfig, embed_dim: usize) -> Result<Self> {
        let w = cfg.width;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&b.pp(format!("blocks.{i}")), w, cfg.heads, cfg.mlp_dim()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            conv1: PatchConv::new(&b.pp("conv1"), 3, w, cfg.patch_size, false)?,
            class_embedding: b.get("class_embedding", vec![w], Init::PROJ)?,
            positional_embedding: b.get("positional_embedding", vec![cfg.tokens() + 1, w], Init::PROJ)?,
            ln_pre: LayerNorm::new(&b.pp("ln_pre"), w, LN_EPS)?,
            blocks,
            ln_post: LayerNorm::new(&b.pp("ln_post"), w, LN_EPS)?,
            proj: b.get("proj", vec![w, embed_dim], Init::fan_in(w))?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Patch projection output before positions and blocks, `(B, N, width)`.
    pub fn patch_tokens(&self, images: &Tensor) -> Result<Tensor> {
        let bsz = images.dims()[0];
        let x = self.conv1.forward(images)?;
        Ok(x.reshape((bsz, self.cfg.tokens(), self.cfg.width))?)
    }

    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let bsz = images.dims()[0];
        let w = self.cfg.width;
        let x = self.patch_tokens(images)?;
        let cls = self.class_embedding.reshape((1, 1, w))?.broadcast_as((bsz, 1, w))?;
        let x = Tensor::cat(&[&cls, &x], 1)?.broadcast_add(&self.positional_embedding.unsqueeze(0)?)?;
        let mut x = self.ln_pre.forward(&x)?;
        for block in &self.blocks {
            x = block.forward(&x, None, None, self.cfg.grid())?;
        }
        let x = self.ln_post.forward(&x.narrow(1, 1, self.cfg.tokens())?)?;
        let dims = x.dims().to_vec();
        let y = x
            .reshape((dims[0] * dims[1], w))?
            .matmul(&self.proj)?
            .reshape((dims[0], dims[1], ()))?;
        Ok(y)
    }
}
