//! Semantic adapters (parallel to each MLP), regular adapters (parallel to
//! attention) and the co-adaptation budget.
//!
//! Every operation works on token layouts `(..., N, C)` with row-major grids
//! and is dtype-generic, so the same code runs in f32 inside the model and in
//! f64 against scalar oracles.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backbone::{PatchEmbeddings, TextEmbedding};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Init, ParamBuilder};
use crate::resize::resize_tokens;
use crate::semantic::SimilarityScores;

/// Which semantic signals reach the semantic adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modalities {
    pub text: bool,
    pub vision: bool,
    pub similarity: bool,
}

impl Modalities {
    pub const FULL: Modalities = Modalities { text: true, vision: true, similarity: true };
    pub const NONE: Modalities = Modalities { text: false, vision: false, similarity: false };

    pub fn any(&self) -> bool {
        self.text || self.vision || self.similarity
    }
}

impl Default for Modalities {
    fn default() -> Self {
        Self::FULL
    }
}

/// The (t, V, s) triple for a single image.
#[derive(Clone, Debug)]
pub struct SemanticInputs {
    pub v: PatchEmbeddings,
    pub s: SimilarityScores,
    pub t: TextEmbedding,
}

impl SemanticInputs {
    pub fn new(v: PatchEmbeddings, s: SimilarityScores, t: TextEmbedding) -> Result<Self> {
        if v.len() != s.values.len() {
            return Err(Error::input(format!(
                "similarity scores have {} entries for {} patches",
                s.values.len(),
                v.len()
            )));
        }
        if v.channels() != t.values.len() {
            return Err(Error::input(format!(
                "text embedding has {} channels, patch embeddings {}",
                t.values.len(),
                v.channels()
            )));
        }
        Ok(Self { v, s, t })
    }

    /// Batch-of-one context in the model's dtype.
    pub fn to_context(&self, modalities: Modalities) -> Result<SemanticContext> {
        let dev = candle_core::Device::Cpu;
        let (n, c) = (self.v.len(), self.v.channels());
        let v = Tensor::from_vec(self.v.values.iter().map(|&x| x as f32).collect::<Vec<_>>(), (1, n, c), &dev)?;
        let s = Tensor::from_vec(self.s.values.iter().map(|&x| x as f32).collect::<Vec<_>>(), (1, n), &dev)?;
        let t = Tensor::from_vec(self.t.values.iter().map(|&x| x as f32).collect::<Vec<_>>(), (1, c), &dev)?;
        SemanticContext::new(&v, &s, &t, self.v.grid, modalities)
    }
}

/// Batched semantic signals as they enter the adapters.
#[derive(Clone, Debug)]
pub struct SemanticContext {
    /// `U = V + s` restricted to the enabled modalities, `(B, N, C_c)`.
    pub fused: Option<Tensor>,
    /// `(B, C_c)`
    pub text: Option<Tensor>,
    pub grid: (usize, usize),
}

impl SemanticContext {
    /// `v: (B, N, C_c)`, `s: (B, N)`, `t: (B, C_c)`.
    pub fn new(v: &Tensor, s: &Tensor, t: &Tensor, grid: (usize, usize), m: Modalities) -> Result<Self> {
        let fused = match (m.vision, m.similarity) {
            (true, true) => Some(fuse_vision_similarity(v, s)?),
            (true, false) => Some(v.clone()),
            (false, true) => Some(fuse_vision_similarity(&v.zeros_like()?, s)?),
            (false, false) => None,
        };
        let text = m.text.then(|| t.clone());
        Ok(Self { fused, text, grid })
    }

    pub fn empty(grid: (usize, usize)) -> Self {
        Self { fused: None, text: None, grid }
    }
}

/// `U = V + s`, with `s` broadcast across channels. `v: (..., N, C)`, `s: (..., N)`.
pub fn fuse_vision_similarity(v: &Tensor, s: &Tensor) -> Result<Tensor> {
    let vd = v.dims();
    if vd.len() < 2 || s.dims() != &vd[..vd.len() - 1] {
        return Err(Error::input(format!(
            "cannot fuse patch embeddings {:?} with similarity scores {:?}",
            vd,
            s.dims()
        )));
    }
    Ok(v.broadcast_add(&s.unsqueeze(D::Minus1)?)?)
}

/// `U W_v^T`, then bilinear resize of the `grid` token layout to `target`.
pub fn project_and_align(u: &Tensor, w_v: &Linear, grid: (usize, usize), target: (usize, usize)) -> Result<Tensor> {
    let in_dim = w_v.weight().dims()[1];
    let ud = u.dims();
    if ud[ud.len() - 1] != in_dim || ud[ud.len() - 2] != grid.0 * grid.1 {
        return Err(Error::config(
            "w_v",
            format!("projection expects (.., {}, {}) got {:?}", grid.0 * grid.1, in_dim, ud),
        ));
    }
    let projected = w_v.forward(u)?;
    let batched = if projected.rank() == 2 { projected.unsqueeze(0)? } else { projected };
    let out = resize_tokens(&batched, grid, target)?;
    if ud.len() == 2 {
        Ok(out.squeeze(0)?)
    } else {
        Ok(out)
    }
}

/// `GELU(W_t t)` tiled over `target`: `t (..., C_c) -> (..., H*W, C_l)`.
pub fn project_text(t: &Tensor, w_t: &Linear, target: (usize, usize)) -> Result<Tensor> {
    let t_prime = project_text_vector(t, w_t)?;
    let mut shape = t_prime.dims().to_vec();
    shape.insert(shape.len() - 1, target.0 * target.1);
    Ok(t_prime.unsqueeze(t_prime.rank() - 1)?.broadcast_as(shape)?.contiguous()?)
}

/// `t' = GELU(W_t t)`, `(..., C_c) -> (..., C_l)`.
pub fn project_text_vector(t: &Tensor, w_t: &Linear) -> Result<Tensor> {
    let in_dim = w_t.weight().dims()[1];
    if t.dims().last() != Some(&in_dim) {
        return Err(Error::config("w_t", format!("projection expects {} channels, got {:?}", in_dim, t.dims())));
    }
    Ok(w_t.forward(t)?.gelu_erf()?)
}

/// `gate * up(GELU(down(x)))`
#[derive(Clone, Debug)]
pub struct Bottleneck {
    down: Linear,
    up: Linear,
    gate: Tensor,
}

impl Bottleneck {
    pub fn new(b: &ParamBuilder, dim: usize, ratio: usize) -> Result<Self> {
        let hidden = (dim / ratio).max(1);
        Ok(Self {
            down: Linear::new(&b.pp("down"), dim, hidden, true)?,
            up: Linear::with_init(&b.pp("up"), hidden, dim, true, Init::Zeros)?,
            gate: b.get("gate", vec![1], Init::Ones)?,
        })
    }

    pub fn from_parts(down: Linear, up: Linear, gate: Tensor) -> Self {
        Self { down, up, gate }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.up.forward(&self.down.forward(x)?.gelu_erf()?)?;
        Ok(h.broadcast_mul(&self.gate)?)
    }
}

/// `delta = gate * up(GELU(down(F + U + T)))`; all three share `(..., N_l, C_l)`.
pub fn semantic_adapter_forward(f: &Tensor, u: &Tensor, t: &Tensor, params: &Bottleneck) -> Result<Tensor> {
    if f.dims() != u.dims() || f.dims() != t.dims() {
        return Err(Error::Internal(format!(
            "semantic adapter shapes differ: F {:?}, U {:?}, T {:?}",
            f.dims(),
            u.dims(),
            t.dims()
        )));
    }
    params.forward(&((f + u)? + t)?)
}

/// `delta = gate * up(GELU(down(F)))`; the caller adds it to the attention output.
pub fn regular_adapter_forward(f: &Tensor, params: &Bottleneck) -> Result<Tensor> {
    params.forward(f)
}

/// Per-block semantic adapter: its own `W_v`, `W_t` and bottleneck.
#[derive(Clone, Debug)]
pub struct SemanticAdapter {
    w_v: Linear,
    w_t: Linear,
    bottleneck: Bottleneck,
}

impl SemanticAdapter {
    pub fn new(b: &ParamBuilder, clip_dim: usize, dim: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            w_v: Linear::new(&b.pp("w_v"), clip_dim, dim, false)?,
            w_t: Linear::new(&b.pp("w_t"), clip_dim, dim, false)?,
            bottleneck: Bottleneck::new(b, dim, ratio)?,
        })
    }

    /// `f: (B, N_l, C_l)` tokens on grid `target`.
    pub fn forward(&self, f: &Tensor, ctx: &SemanticContext, target: (usize, usize)) -> Result<Tensor> {
        let mut fused = f.clone();
        if let Some(u) = &ctx.fused {
            fused = (fused + project_and_align(u, &self.w_v, ctx.grid, target)?)?;
        }
        if let Some(t) = &ctx.text {
            // broadcasting the (B, 1, C_l) row is the tiled T_l without materializing it
            fused = fused.broadcast_add(&project_text_vector(t, &self.w_t)?.unsqueeze(1)?)?;
        }
        self.bottleneck.forward(&fused)
    }
}

/// Placement of trainable vision attention blocks and adapters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub c: usize,
    pub s: usize,
    pub vision_depth: usize,
    pub seg_depth: usize,
    /// Deepest-first indices of vision blocks whose attention is trainable.
    pub vision_trainable: Vec<usize>,
    /// Deepest-first indices of segmentation blocks with a semantic adapter.
    pub semantic_blocks: Vec<usize>,
    pub regular_blocks: Vec<usize>,
}

impl BudgetPlan {
    pub fn has_semantic(&self, block: usize) -> bool {
        self.semantic_blocks.contains(&block)
    }

    pub fn has_regular(&self, block: usize) -> bool {
        self.regular_blocks.contains(&block)
    }

    pub fn vision_attention_trainable(&self, block: usize) -> bool {
        self.vision_trainable.contains(&block)
    }
}

pub fn configure_budget(
    c: usize,
    s: usize,
    vision_depth: usize,
    seg_depth: usize,
    regular_adapters: bool,
) -> Result<BudgetPlan> {
    if c > vision_depth {
        return Err(Error::config("budget.c", format!("{c} exceeds vision depth {vision_depth}")));
    }
    if s > seg_depth {
        return Err(Error::config("budget.s", format!("{s} exceeds segmentation depth {seg_depth}")));
    }
    let top = |k: usize, depth: usize| (depth - k..depth).rev().collect::<Vec<_>>();
    Ok(BudgetPlan {
        c,
        s,
        vision_depth,
        seg_depth,
        vision_trainable: top(c, vision_depth),
        semantic_blocks: top(s, seg_depth),
        regular_blocks: if regular_adapters { (0..seg_depth).collect() } else { Vec::new() },
    })
}
