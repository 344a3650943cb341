use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, CrossAttention, LayerNorm, Mlp, UpConv2x};
use crate::params::{Init, ParamBuilder};
use crate::resize::resize_tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub attention_downsample: usize,
    pub mask_in_chans: usize,
}

impl DecoderConfig {
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("decoder.depth", "must be at least 1"));
        }
        let inner = embed_dim / self.attention_downsample.max(1);
        if self.attention_downsample == 0 || self.heads == 0 || inner % self.heads != 0 || embed_dim % self.heads != 0 {
            return Err(Error::config(
                "decoder.heads",
                format!("{} heads do not divide the attention width {}", self.heads, inner),
            ));
        }
        if embed_dim % 8 != 0 {
            return Err(Error::config("decoder", format!("embed dim {embed_dim} must be a multiple of 8")));
        }
        if self.mask_in_chans < 4 || self.mask_in_chans % 4 != 0 {
            return Err(Error::config("decoder.mask_in_chans", "must be a positive multiple of 4"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct TwoWayLayer {
    self_attn: CrossAttention,
    norm1: LayerNorm,
    cross_t2i: CrossAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    cross_i2t: CrossAttention,
    norm4: LayerNorm,
    skip_first_pe: bool,
}

impl TwoWayLayer {
    fn new(b: &ParamBuilder, dim: usize, cfg: &DecoderConfig, skip_first_pe: bool) -> Result<Self> {
        let ds = cfg.attention_downsample;
        Ok(Self {
            self_attn: CrossAttention::new(&b.pp("self_attn"), dim, cfg.heads, 1)?,
            norm1: LayerNorm::new(&b.pp("norm1"), dim, 1e-5)?,
            cross_t2i: CrossAttention::new(&b.pp("cross_attn_token_to_image"), dim, cfg.heads, ds)?,
            norm2: LayerNorm::new(&b.pp("norm2"), dim, 1e-5)?,
            mlp: Mlp::new(&b.pp("mlp"), &[dim, cfg.mlp_dim, dim], Activation::Relu)?,
            norm3: LayerNorm::new(&b.pp("norm3"), dim, 1e-5)?,
            cross_i2t: CrossAttention::new(&b.pp("cross_attn_image_to_token"), dim, cfg.heads, ds)?,
            norm4: LayerNorm::new(&b.pp("norm4"), dim, 1e-5)?,
            skip_first_pe,
        })
    }

    fn forward(&self, queries: &Tensor, keys: &Tensor, query_pe: &Tensor, key_pe: &Tensor) -> Result<(Tensor, Tensor)> {
        let queries = if self.skip_first_pe {
            self.self_attn.forward(queries, queries, queries)?
        } else {
            let q = (queries + query_pe)?;
            (queries + self.self_attn.forward(&q, &q, queries)?)?
        };
        let queries = self.norm1.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let k = keys.broadcast_add(key_pe)?;
        let queries = self.norm2.forward(&(&queries + self.cross_t2i.forward(&q, &k, keys)?)?)?;

        let queries = self.norm3.forward(&(&queries + self.mlp.forward(&queries)?)?)?;

        let q = (&queries + query_pe)?;
        let keys = self.norm4.forward(&(keys + self.cross_i2t.forward(&k, &q, &queries)?)?)?;
        Ok((queries, keys))
    }
}

/// Two-way transformer over prompt tokens and image tokens, then a
/// hypernetwork-weighted 4x upscaled feature map, bilinearly resized to the image.
#[derive(Clone, Debug)]
pub struct MaskDecoder {
    layers: Vec<TwoWayLayer>,
    final_attn: CrossAttention,
    norm_final: LayerNorm,
    mask_token: Tensor,
    up1: UpConv2x,
    up_ln: LayerNorm,
    up2: UpConv2x,
    hyper: Mlp,
    grid: (usize, usize),
    image_size: (usize, usize),
}

impl MaskDecoder {
    pub fn new(
        b: &ParamBuilder,
        dim: usize,
        cfg: &DecoderConfig,
        grid: (usize, usize),
        image_size: (usize, usize),
    ) -> Result<Self> {
        let t = b.pp("transformer");
        let layers = (0..cfg.depth)
            .map(|i| TwoWayLayer::new(&t.pp(format!("layers.{i}")), dim, cfg, i == 0))
            .collect::<Result<Vec<_>>>()?;
        let up = b.pp("output_upscaling");
        Ok(Self {
            layers,
            final_attn: CrossAttention::new(&t.pp("final_attn_token_to_image"), dim, cfg.heads, cfg.attention_downsample)?,
            norm_final: LayerNorm::new(&t.pp("norm_final_attn"), dim, 1e-5)?,
            mask_token: b.get("mask_token", vec![1, 1, dim], Init::Normal { std: 1.0 })?,
            up1: UpConv2x::new(&up.pp("0"), dim, dim / 4)?,
            up_ln: LayerNorm::new(&up.pp("1"), dim / 4, 1e-6)?,
            up2: UpConv2x::new(&up.pp("3"), dim / 4, dim / 8)?,
            hyper: Mlp::new(&b.pp("output_hypernetwork"), &[dim, dim, dim, dim / 8], Activation::Relu)?,
            grid,
            image_size,
        })
    }

    /// `image (B, N, D)`, `image_pe (N, D)`, `sparse (B, K, D)`, `dense (B, N, D)` -> logits `(B, H, W)`.
    pub fn forward(&self, image: &Tensor, image_pe: &Tensor, sparse: &Tensor, dense: &Tensor) -> Result<Tensor> {
        let (bsz, n, dim) = image.dims3()?;
        if n != self.grid.0 * self.grid.1 || dense.dims() != image.dims() {
            return Err(Error::Internal(format!(
                "decoder inputs {:?} / {:?} do not match grid {:?}",
                image.dims(),
                dense.dims(),
                self.grid
            )));
        }
        let mask_token = self.mask_token.broadcast_as((bsz, 1, dim))?;
        let tokens = Tensor::cat(&[&mask_token, sparse], 1)?;
        let keys = (image + dense)?;
        let key_pe = image_pe.unsqueeze(0)?;

        let mut queries = tokens.clone();
        let mut keys = keys;
        for layer in &self.layers {
            let (q, k) = layer.forward(&queries, &keys, &tokens, &key_pe)?;
            queries = q;
            keys = k;
        }
        let q = (&queries + &tokens)?;
        let k = keys.broadcast_add(&key_pe)?;
        let queries = self.norm_final.forward(&(&queries + self.final_attn.forward(&q, &k, &keys)?)?)?;

        let (gh, gw) = self.grid;
        let x = keys.reshape((bsz, gh, gw, dim))?;
        let x = self.up_ln.forward(&self.up1.forward(&x)?)?.gelu_erf()?;
        let x = self.up2.forward(&x)?.gelu_erf()?;
        let (uh, uw) = (gh * 4, gw * 4);
        let x = x.reshape((bsz, uh * uw, dim / 8))?;
        let hyper = self.hyper.forward(&queries.narrow(1, 0, 1)?)?;
        let low = x.matmul(&hyper.transpose(1, 2)?)?.reshape((bsz, uh, uw))?;
        resize_tensor(&low, self.image_size)
    }
}
