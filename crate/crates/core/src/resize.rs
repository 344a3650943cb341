//! Bilinear (half-pixel, edge-clamped) and nearest-neighbor resampling.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, ArrayView2};

use crate::error::Result;

/// Source taps `(i0, i1, w1)` per output index: `out[o] = (1 - w1) in[i0] + w1 in[i1]`.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, w1)
        })
        .collect()
}

/// Dense `(out_len, in_len)` interpolation matrix.
pub fn bilinear_matrix(in_len: usize, out_len: usize) -> Array2<f64> {
    let mut m = Array2::zeros((out_len, in_len));
    for (o, (i0, i1, w1)) in bilinear_taps(in_len, out_len).into_iter().enumerate() {
        m[[o, i0]] += 1.0 - w1;
        m[[o, i1]] += w1;
    }
    m
}

pub fn resize_bilinear(src: ArrayView2<f64>, out: (usize, usize)) -> Array2<f64> {
    let (h, w) = src.dim();
    if (h, w) == out {
        return src.to_owned();
    }
    let ry = bilinear_matrix(h, out.0);
    let rx = bilinear_matrix(w, out.1);
    ry.dot(&src).dot(&rx.t())
}

/// Nearest-neighbor with the half-pixel source index `floor((o + 0.5) * in / out)`.
pub fn nearest_index(in_len: usize, out_len: usize, o: usize) -> usize {
    (((o as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
}

pub fn resize_nearest<T: Copy>(src: ArrayView2<T>, out: (usize, usize)) -> Array2<T> {
    let (h, w) = src.dim();
    Array2::from_shape_fn(out, |(r, c)| src[[nearest_index(h, out.0, r), nearest_index(w, out.1, c)]])
}

/// Row and column interpolation matrices as tensors: `ry (out_h, in_h)`, `rx_t (in_w, out_w)`.
pub fn bilinear_operators(
    input: (usize, usize),
    output: (usize, usize),
    dtype: DType,
    device: &Device,
) -> Result<(Tensor, Tensor)> {
    let to_tensor = |m: Array2<f64>| -> Result<Tensor> {
        let shape = m.dim();
        let data: Vec<f64> = m.iter().copied().collect();
        Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
    };
    let ry = to_tensor(bilinear_matrix(input.0, output.0))?;
    let rx_t = to_tensor(bilinear_matrix(input.1, output.1).reversed_axes().as_standard_layout().to_owned())?;
    Ok((ry, rx_t))
}

/// Bilinear resize of the last two dims of `x (..., H, W)`.
pub fn resize_tensor(x: &Tensor, output: (usize, usize)) -> Result<Tensor> {
    let dims = x.dims();
    let n = dims.len();
    let input = (dims[n - 2], dims[n - 1]);
    if input == output {
        return Ok(x.clone());
    }
    let (ry, rx_t) = bilinear_operators(input, output, x.dtype(), x.device())?;
    Ok(ry.broadcast_matmul(&x.broadcast_matmul(&rx_t)?)?)
}

/// Bilinear resize of a token grid `x (B, H*W, C)` to `(B, H'*W', C)`.
pub fn resize_tokens(x: &Tensor, grid: (usize, usize), target: (usize, usize)) -> Result<Tensor> {
    if grid == target {
        return Ok(x.clone());
    }
    let (ry, rx_t) = bilinear_operators(grid, target, x.dtype(), x.device())?;
    let rx = rx_t.t()?;
    let op = kron(&ry, &rx)?;
    Ok(op.broadcast_matmul(x)?)
}

fn kron(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (am, an) = a.dims2()?;
    let (bm, bn) = b.dims2()?;
    let k = a
        .reshape((am, 1, an, 1))?
        .broadcast_mul(&b.reshape((1, bm, 1, bn))?)?
        .reshape((am * bm, an * bn))?;
    Ok(k)
}
