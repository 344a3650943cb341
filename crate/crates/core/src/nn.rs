//! Layers built from differentiable candle primitives only.
//!
//! candle's fused layer-norm and sigmoid kernels have no backward pass, and
//! the convolutions used here all have stride equal to kernel size, so they
//! are expressed as patch reshapes followed by a matmul.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::params::{Init, ParamBuilder};

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &ParamBuilder, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        Self::with_init(b, in_dim, out_dim, bias, Init::fan_in(in_dim))
    }

    pub fn with_init(b: &ParamBuilder, in_dim: usize, out_dim: usize, bias: bool, init: Init) -> Result<Self> {
        let weight = b.get("weight", vec![out_dim, in_dim], init)?;
        let bias = if bias {
            Some(b.get("bias", vec![out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// `x[..., in] -> x[..., out]`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("linear input has at least one dim");
        let rows = x.elem_count() / in_dim;
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out)?)
    }
}

/// Layer normalization over the last dimension (channels-last feature maps included).
#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(b: &ParamBuilder, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: b.get("weight", vec![dim], Init::Ones)?,
            bias: b.get("bias", vec![dim], Init::Zeros)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Gelu => x.gelu_erf()?,
            Activation::Relu => x.relu()?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    act: Activation,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`; the activation follows every layer but the last.
    pub fn new(b: &ParamBuilder, dims: &[usize], act: Activation) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&b.pp(format!("lin{}", i + 1)), w[0], w[1], true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, act })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = self.act.apply(&h)?;
            }
        }
        Ok(h)
    }
}

/// Scaled dot-product attention over `heads` heads.
///
/// `q: (B, Nq, E)`, `k, v: (B, Nk, E)`; `mask` is added to the logits and
/// must broadcast to `(B, heads, Nq, Nk)`.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, mask: Option<&Tensor>) -> Result<Tensor> {
    let (b, nq, e) = q.dims3()?;
    let nk = k.dims()[1];
    let hd = e / heads;
    let split = |t: &Tensor, n: usize| -> Result<Tensor> {
        Ok(t.reshape((b, n, heads, hd))?.transpose(1, 2)?.contiguous()?)
    };
    let q = split(q, nq)?;
    let k = split(k, nk)?;
    let v = split(v, nk)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut logits = (q.matmul(&k.t()?)? * scale)?;
    if let Some(m) = mask {
        logits = logits.broadcast_add(m)?;
    }
    let probs = candle_nn::ops::softmax(&logits, D::Minus1)?;
    let out = probs.matmul(&v)?;
    Ok(out.transpose(1, 2)?.reshape((b, nq, e))?)
}

/// ViT-style self-attention with a fused qkv projection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(b: &ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(&b.pp("qkv"), dim, 3 * dim, true)?,
            proj: Linear::new(&b.pp("proj"), dim, dim, true)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (_, _, c) = x.dims3()?;
        let qkv = self.qkv.forward(x)?;
        let q = qkv.narrow(2, 0, c)?;
        let k = qkv.narrow(2, c, c)?;
        let v = qkv.narrow(2, 2 * c, c)?;
        let out = attend(&q, &k, &v, self.heads, mask)?;
        self.proj.forward(&out)
    }
}

/// Attention with separate q/k/v projections and an optional internal
/// down-projection (`dim / downsample` channels), as used by two-way decoders.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl CrossAttention {
    pub fn new(b: &ParamBuilder, dim: usize, heads: usize, downsample: usize) -> Result<Self> {
        let inner = dim / downsample;
        Ok(Self {
            q: Linear::new(&b.pp("q_proj"), dim, inner, true)?,
            k: Linear::new(&b.pp("k_proj"), dim, inner, true)?,
            v: Linear::new(&b.pp("v_proj"), dim, inner, true)?,
            out: Linear::new(&b.pp("out_proj"), inner, dim, true)?,
            heads,
        })
    }

    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let q = self.q.forward(q)?;
        let k = self.k.forward(k)?;
        let v = self.v.forward(v)?;
        let out = attend(&q, &k, &v, self.heads, None)?;
        self.out.forward(&out)
    }
}

/// Convolution whose stride equals its kernel size (patch embedding, 2x2/s2 downscaling).
///
/// Weights use the `(out, in, k, k)` layout. Input and output are channels-last:
/// `(B, H, W, C_in) -> (B, H/k, W/k, C_out)`.
#[derive(Clone, Debug)]
pub struct PatchConv {
    weight: Tensor,
    bias: Option<Tensor>,
    kernel: usize,
}

impl PatchConv {
    pub fn new(b: &ParamBuilder, in_ch: usize, out_ch: usize, kernel: usize, bias: bool) -> Result<Self> {
        let weight = b.get("weight", vec![out_ch, in_ch, kernel, kernel], Init::fan_in(in_ch * kernel * kernel))?;
        let bias = if bias {
            Some(b.get("bias", vec![out_ch], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias, kernel })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bsz, h, w, c) = x.dims4()?;
        let k = self.kernel;
        let (gh, gw) = (h / k, w / k);
        let patches = x
            .reshape(vec![bsz, gh, k, gw, k, c])?
            .permute(vec![0, 1, 3, 5, 2, 4])?
            .reshape((bsz * gh * gw, c * k * k))?;
        let out_ch = self.weight.dims()[0];
        let w2 = self.weight.reshape((out_ch, c * k * k))?;
        let mut y = patches.matmul(&w2.t()?)?;
        if let Some(bias) = &self.bias {
            y = y.broadcast_add(bias)?;
        }
        Ok(y.reshape((bsz, gh, gw, out_ch))?)
    }
}

/// 2x2 transposed convolution with stride 2, channels-last.
///
/// Weights use the `(in, out, 2, 2)` layout.
#[derive(Clone, Debug)]
pub struct UpConv2x {
    weight: Tensor,
    bias: Tensor,
}

impl UpConv2x {
    pub fn new(b: &ParamBuilder, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            weight: b.get("weight", vec![in_ch, out_ch, 2, 2], Init::fan_in(in_ch))?,
            bias: b.get("bias", vec![out_ch], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bsz, h, w, c) = x.dims4()?;
        let out_ch = self.weight.dims()[1];
        let y = x
            .reshape((bsz * h * w, c))?
            .matmul(&self.weight.reshape((c, out_ch * 4))?)?
            .reshape(vec![bsz, h, w, out_ch, 2, 2])?
            .permute(vec![0, 1, 4, 2, 5, 3])?
            .reshape((bsz, 2 * h, 2 * w, out_ch))?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// 3x3 convolution, padding 1, no bias, channels-last (im2col).
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    weight: Tensor,
}

impl Conv3x3 {
    pub fn new(b: &ParamBuilder, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            weight: b.get("weight", vec![out_ch, in_ch, 3, 3], Init::fan_in(in_ch * 9))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bsz, h, w, c) = x.dims4()?;
        let padded = x.pad_with_zeros(1, 1, 1)?.pad_with_zeros(2, 1, 1)?;
        let mut cols = Vec::with_capacity(9);
        for dy in 0..3 {
            for dx in 0..3 {
                cols.push(padded.narrow(1, dy, h)?.narrow(2, dx, w)?);
            }
        }
        // column order (ky, kx, c) matches the weight permuted to (out, ky, kx, in)
        let cols = Tensor::cat(&cols, 3)?.reshape((bsz * h * w, 9 * c))?;
        let out_ch = self.weight.dims()[0];
        let w2 = self.weight.permute((0, 2, 3, 1))?.reshape((out_ch, 9 * c))?;
        Ok(cols.matmul(&w2.t()?)?.reshape((bsz, h, w, out_ch))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamStore, Tracking};
    use candle_core::{DType, Device};

    fn store() -> ParamStore {
        ParamStore::new(5)
    }

    #[test]
    fn patch_conv_matches_direct_convolution() {
        let s = store();
        PatchConv::new(&s.builder(Tracking::None).pp("c"), 2, 3, 2, true).unwrap();
        s.perturb(|_| true, 1.0, 9).unwrap();
        let conv = PatchConv::new(&s.builder(Tracking::None).pp("c"), 2, 3, 2, true).unwrap();
        let x = Tensor::randn(0f32, 1.0, (1, 4, 4, 2), &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap();
        let xs: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
        let ws: Vec<f32> = conv.weight.flatten_all().unwrap().to_vec1().unwrap();
        let bs: Vec<f32> = conv.bias.as_ref().unwrap().to_vec1().unwrap();
        let ys: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                for o in 0..3 {
                    let mut acc = bs[o];
                    for ci in 0..2 {
                        for ky in 0..2 {
                            for kx in 0..2 {
                                let xi = ((oy * 2 + ky) * 4 + (ox * 2 + kx)) * 2 + ci;
                                let wi = ((o * 2 + ci) * 2 + ky) * 2 + kx;
                                acc += xs[xi] * ws[wi];
                            }
                        }
                    }
                    let got = ys[(oy * 2 + ox) * 3 + o];
                    assert!((got - acc).abs() < 1e-5, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn up_conv_scatters_each_input_to_a_2x2_block() {
        let s = store();
        s.builder(Tracking::None).pp("u").get("weight", vec![1, 1, 2, 2], Init::Zeros).unwrap();
        s.insert(
            "u.weight",
            &Tensor::new(&[1f32, 2., 3., 4.], &Device::Cpu).unwrap().reshape((1, 1, 2, 2)).unwrap(),
            crate::params::ParamKind::Weight,
        )
        .unwrap();
        let up = UpConv2x::new(&s.builder(Tracking::None).pp("u"), 1, 1).unwrap();
        let x = Tensor::new(&[1f32, 10.], &Device::Cpu).unwrap().reshape((1, 1, 2, 1)).unwrap();
        let y = up.forward(&x).unwrap().squeeze(3).unwrap().squeeze(0).unwrap();
        assert_eq!(
            y.to_vec2::<f32>().unwrap(),
            vec![vec![1., 2., 10., 20.], vec![3., 4., 30., 40.]]
        );
    }

    #[test]
    fn conv3x3_identity_kernel_is_identity() {
        let s = store();
        let mut w = vec![0f32; 2 * 2 * 9];
        for c in 0..2 {
            w[(c * 2 + c) * 9 + 4] = 1.0;
        }
        s.insert(
            "k.weight",
            &Tensor::from_vec(w, (2, 2, 3, 3), &Device::Cpu).unwrap(),
            crate::params::ParamKind::Weight,
        )
        .unwrap();
        let conv = Conv3x3::new(&s.builder(Tracking::None).pp("k"), 2, 2).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 3, 5, 2), &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap();
        let diff = (y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn layer_norm_normalizes_last_dim() {
        let s = store();
        let ln = LayerNorm::new(&s.builder(Tracking::None).pp("ln"), 8, 1e-6).unwrap();
        let x = Tensor::randn(3f32, 2.0, (4, 8), &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap();
        let m = y.mean_keepdim(1).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(m < 1e-5);
        let v = y.sqr().unwrap().mean_keepdim(1).unwrap().to_dtype(DType::F64).unwrap();
        for x in v.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((x - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let v = Tensor::new(&[[[1f32, 0.], [3., 0.]]], &Device::Cpu).unwrap();
        let q = Tensor::zeros((1, 1, 2), DType::F32, &Device::Cpu).unwrap();
        let out = attend(&q, &v, &v, 1, None).unwrap();
        assert_eq!(out.to_vec3::<f32>().unwrap(), vec![vec![vec![2., 0.]]]);
    }
}
