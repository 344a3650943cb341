use std::f64::consts::PI;

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, PatchConv};
use crate::params::{Init, ParamBuilder};
use crate::semantic::{DensePrompt, PointPrompts};

/// Random-Fourier positional encoding of points and a conv stack for dense masks.
#[derive(Clone, Debug)]
pub struct PromptEncoder {
    embed_dim: usize,
    image_size: (usize, usize),
    grid: (usize, usize),
    gaussian: Tensor,
    point_embed: Tensor,
    no_mask_embed: Tensor,
    down1: PatchConv,
    ln1: LayerNorm,
    down2: PatchConv,
    ln2: LayerNorm,
    down3: Linear,
}

impl PromptEncoder {
    pub fn new(
        b: &ParamBuilder,
        embed_dim: usize,
        image_size: (usize, usize),
        grid: (usize, usize),
        mask_in_chans: usize,
    ) -> Result<Self> {
        let md = b.pp("mask_downscaling");
        let c4 = (mask_in_chans / 4).max(1);
        let conv3 = md.pp("conv3");
        let w3 = conv3.get("weight", vec![embed_dim, mask_in_chans, 1, 1], Init::fan_in(mask_in_chans))?;
        let b3 = conv3.get("bias", vec![embed_dim], Init::Zeros)?;
        Ok(Self {
            embed_dim,
            image_size,
            grid,
            gaussian: b.pp("pe_layer").buffer("gaussian", vec![2, embed_dim / 2], Init::Normal { std: 1.0 })?,
            point_embed: b.get("point_embed", vec![1, embed_dim], Init::Normal { std: 1.0 })?,
            no_mask_embed: b.get("no_mask_embed", vec![1, embed_dim], Init::Normal { std: 1.0 })?,
            down1: PatchConv::new(&md.pp("conv1"), 1, c4, 2, true)?,
            ln1: LayerNorm::new(&md.pp("ln1"), c4, 1e-6)?,
            down2: PatchConv::new(&md.pp("conv2"), c4, mask_in_chans, 2, true)?,
            ln2: LayerNorm::new(&md.pp("ln2"), mask_in_chans, 1e-6)?,
            down3: Linear::from_tensors(w3.reshape((embed_dim, mask_in_chans))?, Some(b3)),
        })
    }

    pub fn dense_resolution(&self) -> (usize, usize) {
        (self.grid.0 * 4, self.grid.1 * 4)
    }

    /// `coords (..., 2)` as `(x, y)` in `[0, 1]` -> `(..., D)`.
    fn pe_encode(&self, coords: &Tensor) -> Result<Tensor> {
        let c = ((coords * 2.0)? - 1.0)?;
        let c = (c.broadcast_matmul(&self.gaussian)? * (2.0 * PI))?;
        Ok(Tensor::cat(&[&c.sin()?, &c.cos()?], candle_core::D::Minus1)?)
    }

    /// Positional encoding of every feature-grid cell center, `(N, D)`.
    pub fn dense_pe(&self) -> Result<Tensor> {
        let (h, w) = self.grid;
        let mut coords = Vec::with_capacity(h * w * 2);
        for r in 0..h {
            for c in 0..w {
                coords.push((c as f32 + 0.5) / w as f32);
                coords.push((r as f32 + 0.5) / h as f32);
            }
        }
        self.pe_encode(&Tensor::from_vec(coords, (h * w, 2), &Device::Cpu)?)
    }

    /// Sparse embeddings `(B, K, D)`; every point set in the batch must have the same K.
    pub fn encode_points(&self, points: &[&PointPrompts]) -> Result<Tensor> {
        let k = points.first().map_or(0, |p| p.k());
        let (h, w) = self.image_size;
        let mut coords = Vec::with_capacity(points.len() * k * 2);
        for p in points {
            p.check_bounds(h, w)?;
            if p.k() != k {
                return Err(Error::input("point sets in a batch must have equal K"));
            }
            for pt in &p.points {
                coords.push((pt.col as f32 + 0.5) / w as f32);
                coords.push((pt.row as f32 + 0.5) / h as f32);
            }
        }
        let coords = Tensor::from_vec(coords, (points.len(), k, 2), &Device::Cpu)?;
        Ok(self.pe_encode(&coords)?.broadcast_add(&self.point_embed)?)
    }

    /// Dense embeddings `(B, N, D)`; `None` entries use the learned no-mask embedding.
    pub fn encode_dense(&self, dense: &[Option<&DensePrompt>]) -> Result<Tensor> {
        let n = self.grid.0 * self.grid.1;
        let res = self.dense_resolution();
        let mut rows = Vec::with_capacity(dense.len());
        let mut masks = Vec::new();
        let mut mask_rows = Vec::new();
        for (i, d) in dense.iter().enumerate() {
            match d {
                Some(d) => {
                    if d.values.dim() != res {
                        return Err(Error::input(format!(
                            "dense prompt is {:?}, expected {:?}",
                            d.values.dim(),
                            res
                        )));
                    }
                    masks.extend(d.values.iter().map(|&v| v as f32));
                    mask_rows.push(i);
                    rows.push(None);
                }
                None => rows.push(Some(self.no_mask_embed.broadcast_as((n, self.embed_dim))?)),
            }
        }
        let mut embedded = if mask_rows.is_empty() {
            Vec::new()
        } else {
            let x = Tensor::from_vec(masks, (mask_rows.len(), res.0, res.1, 1), &Device::Cpu)?;
            let x = self.ln1.forward(&self.down1.forward(&x)?)?.gelu_erf()?;
            let x = self.ln2.forward(&self.down2.forward(&x)?)?.gelu_erf()?;
            let x = self.down3.forward(&x)?.reshape((mask_rows.len(), n, self.embed_dim))?;
            (0..mask_rows.len()).rev().map(|i| x.get(i)).collect::<candle_core::Result<Vec<_>>>()?
        };
        let out = rows
            .into_iter()
            .map(|r| r.unwrap_or_else(|| embedded.pop().expect("one embedding per dense prompt")))
            .collect::<Vec<_>>();
        Ok(Tensor::stack(&out, 0)?)
    }
}
