use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

const EPS: f64 = f64::EPSILON;

fn same_shape<A, B>(a: ArrayView2<A>, b: ArrayView2<B>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Eval(format!("shape mismatch: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `(|p & g|, |p | g|)`
pub fn intersection_union(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<(u64, u64)> {
    same_shape(pred, gt)?;
    let mut inter = 0;
    let mut union = 0;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (p != 0, g != 0);
        inter += u64::from(p && g);
        union += u64::from(p || g);
    }
    Ok((inter, union))
}

/// `|p & g| / |p | g|`, 1 when both are empty.
pub fn binary_iou(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<f64> {
    let (i, u) = intersection_union(pred, gt)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MiouResult {
    pub per_class: BTreeMap<String, f64>,
    pub miou: f64,
}

/// Per-class intersection and union accumulated over a split, then divided.
#[derive(Clone, Debug, Default)]
pub struct IouAccumulator {
    totals: BTreeMap<String, (u64, u64)>,
}

impl IouAccumulator {
    pub fn add(&mut self, class: &str, pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<()> {
        let (i, u) = intersection_union(pred, gt)?;
        let e = self.totals.entry(class.to_string()).or_default();
        e.0 += i;
        e.1 += u;
        Ok(())
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        for (c, (i, u)) in &other.totals {
            let e = self.totals.entry(c.clone()).or_default();
            e.0 += i;
            e.1 += u;
        }
    }

    /// Classes with zero accumulated union are left out of the mean.
    pub fn finish(&self) -> MiouResult {
        let per_class: BTreeMap<String, f64> = self
            .totals
            .iter()
            .filter(|(_, (_, u))| *u > 0)
            .map(|(c, (i, u))| (c.clone(), *i as f64 / *u as f64))
            .collect();
        let miou = if per_class.is_empty() { 0.0 } else { per_class.values().sum::<f64>() / per_class.len() as f64 };
        MiouResult { per_class, miou }
    }
}

/// `predictions` and `gts` are keyed by `(image id, class)`; only classes in `classes` count.
pub fn miou_protocol(
    predictions: &BTreeMap<(String, String), Array2<u8>>,
    gts: &BTreeMap<(String, String), Array2<u8>>,
    classes: &[String],
) -> Result<MiouResult> {
    let mut acc = IouAccumulator::default();
    for ((id, class), gt) in gts {
        if !classes.contains(class) {
            continue;
        }
        let pred = predictions
            .get(&(id.clone(), class.clone()))
            .ok_or_else(|| Error::Eval(format!("no prediction for image {id}, class {class}")))?;
        acc.add(class, pred.view(), gt.view())?;
    }
    Ok(acc.finish())
}

pub fn mae(pred: ArrayView2<f64>, gt: ArrayView2<u8>) -> Result<f64> {
    same_shape(pred, gt)?;
    let n = pred.len() as f64;
    Ok(pred.iter().zip(gt.iter()).map(|(&p, &g)| (p - f64::from(g)).abs()).sum::<f64>() / n)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn s_object(values: &[f64]) -> f64 {
    let (x, sigma) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn ssim(pred: ArrayView2<f64>, gt: ArrayView2<f64>) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let x = pred.mean().unwrap_or(0.0);
    let y = gt.mean().unwrap_or(0.0);
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        sx += (p - x) * (p - x);
        sy += (g - y) * (g - y);
        sxy += (p - x) * (g - y);
    }
    let (sx, sy, sxy) = (sx / denom, sy / denom, sxy / denom);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure with alpha = 0.5.
pub fn s_measure(pred: ArrayView2<f64>, gt: ArrayView2<u8>) -> Result<f64> {
    same_shape(pred, gt)?;
    let (h, w) = gt.dim();
    let n = (h * w) as f64;
    let fg_count = gt.iter().filter(|&&g| g != 0).count();
    let y = fg_count as f64 / n;
    let pred_mean = pred.mean().unwrap_or(0.0);
    if fg_count == 0 {
        return Ok((1.0 - pred_mean).clamp(0.0, 1.0));
    }
    if fg_count == h * w {
        return Ok(pred_mean.clamp(0.0, 1.0));
    }
    let fg: Vec<f64> = pred.iter().zip(gt.iter()).filter(|(_, &g)| g != 0).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred.iter().zip(gt.iter()).filter(|(_, &g)| g == 0).map(|(&p, _)| 1.0 - p).collect();
    let object = y * s_object(&fg) + (1.0 - y) * s_object(&bg);

    // centroid, rounded half to even, shifted by one as in the reference implementation
    let (mut sr, mut sc) = (0.0, 0.0);
    for ((r, c), &g) in gt.indexed_iter() {
        if g != 0 {
            sr += r as f64;
            sc += c as f64;
        }
    }
    let cy = ((sr / fg_count as f64).round_ties_even() as usize + 1).min(h);
    let cx = ((sc / fg_count as f64).round_ties_even() as usize + 1).min(w);
    let gtf = gt.mapv(f64::from);
    let area = n;
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((w - cx) * cy) as f64 / area;
    let w3 = (cx * (h - cy)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    use ndarray::s;
    let quads = [
        (w1, s![0..cy, 0..cx]),
        (w2, s![0..cy, cx..w]),
        (w3, s![cy..h, 0..cx]),
        (w4, s![cy..h, cx..w]),
    ];
    let region: f64 = quads
        .iter()
        .map(|(wt, sl)| wt * ssim(pred.slice(sl), gtf.slice(sl)))
        .sum();
    Ok((0.5 * object + 0.5 * region).clamp(0.0, 1.0))
}

/// Enhanced-alignment measure of the prediction binarized at 0.5.
pub fn e_measure(pred: ArrayView2<f64>, gt: ArrayView2<u8>) -> Result<f64> {
    same_shape(pred, gt)?;
    let n = pred.len() as f64;
    let (mut tp, mut fp, mut gt_fg) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (p >= 0.5, g != 0);
        tp += f64::from(u8::from(p && g));
        fp += f64::from(u8::from(p && !g));
        gt_fg += f64::from(u8::from(g));
    }
    let pred_fg = tp + fp;
    let pred_bg = n - pred_fg;
    let sum = if gt_fg == 0.0 {
        pred_bg
    } else if gt_fg == n {
        pred_fg
    } else {
        let fn_ = gt_fg - tp;
        let tn = pred_bg - fn_;
        let mp = pred_fg / n;
        let mg = gt_fg / n;
        let parts = [(tp, 1.0 - mp, 1.0 - mg), (fp, 1.0 - mp, -mg), (fn_, -mp, 1.0 - mg), (tn, -mp, -mg)];
        parts
            .iter()
            .map(|&(count, a, b)| {
                let align = 2.0 * a * b / (a * a + b * b + EPS);
                count * (align + 1.0).powi(2) / 4.0
            })
            .sum()
    };
    Ok((sum / n).clamp(0.0, 1.0))
}

/// Normalized 7x7 Gaussian, sigma 5, small taps zeroed as in `fspecial`.
fn gaussian_kernel() -> [[f64; 7]; 7] {
    let mut k = [[0.0; 7]; 7];
    let mut max = 0.0f64;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (y, x) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(x * x + y * y) / (2.0 * 25.0)).exp();
            max = max.max(*v);
        }
    }
    let mut sum = 0.0;
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            if *v < EPS * max {
                *v = 0.0;
            }
            sum += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    k
}

/// Nearest foreground pixel (first in row-major order on ties) and its Euclidean distance.
fn nearest_foreground(gt: ArrayView2<u8>) -> Array2<((usize, usize), f64)> {
    let fg: Vec<(usize, usize)> = gt.indexed_iter().filter(|(_, &g)| g != 0).map(|(ij, _)| ij).collect();
    Array2::from_shape_fn(gt.dim(), |(r, c)| {
        if gt[[r, c]] != 0 {
            return ((r, c), 0.0);
        }
        let mut best = (fg[0], f64::INFINITY);
        for &(fr, fc) in &fg {
            let d = (fr as f64 - r as f64).powi(2) + (fc as f64 - c as f64).powi(2);
            if d < best.1 {
                best = ((fr, fc), d);
            }
        }
        (best.0, best.1.sqrt())
    })
}

/// Weighted F-measure with beta^2 = 1; 0 when the ground truth is empty.
pub fn weighted_fbeta(pred: ArrayView2<f64>, gt: ArrayView2<u8>) -> Result<f64> {
    same_shape(pred, gt)?;
    if gt.iter().all(|&g| g == 0) {
        return Ok(0.0);
    }
    let (h, w) = gt.dim();
    let e = Array2::from_shape_fn((h, w), |(r, c)| (pred[[r, c]] - f64::from(gt[[r, c]] != 0)).abs());
    let near = nearest_foreground(gt);
    let et = Array2::from_shape_fn((h, w), |(r, c)| {
        let (ij, _) = near[[r, c]];
        e[ij]
    });
    let k = gaussian_kernel();
    let ea = Array2::from_shape_fn((h, w), |(r, c)| {
        let mut acc = 0.0;
        for (i, row) in k.iter().enumerate() {
            for (j, kv) in row.iter().enumerate() {
                let rr = r as isize + i as isize - 3;
                let cc = c as isize + j as isize - 3;
                if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                    acc += kv * et[[rr as usize, cc as usize]];
                }
            }
        }
        acc
    });
    let (mut tp_w, mut fp_w, mut ew_fg, mut n_fg) = (0.0, 0.0, 0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            let fg = gt[[r, c]] != 0;
            let min_e = if fg && ea[[r, c]] < e[[r, c]] { ea[[r, c]] } else { e[[r, c]] };
            let b = if fg { 1.0 } else { 2.0 - ((0.5f64).ln() / 5.0 * near[[r, c]].1).exp() };
            let ew = min_e * b;
            if fg {
                ew_fg += ew;
                n_fg += 1.0;
            } else {
                fp_w += ew;
            }
        }
    }
    tp_w += n_fg - ew_fg;
    let recall = 1.0 - ew_fg / n_fg;
    let precision = tp_w / (tp_w + fp_w + EPS);
    Ok((2.0 * recall * precision / (recall + precision + EPS)).clamp(0.0, 1.0))
}
