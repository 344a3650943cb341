//! Similarity scores, normalized maps, prompt masks and prompt sampling.

use std::path::Path;

use candle_core::{Tensor, D};
use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{PatchEmbeddings, TextEmbedding};
use crate::error::{Error, Result};
use crate::resize::{resize_bilinear, resize_nearest};
use crate::rng::substream;

pub const NORM_EPS: f64 = 1e-8;
pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_K: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScores {
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    pub values: Array2<f64>,
    pub normalized: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryPromptMask {
    pub values: Array2<u8>,
    pub threshold_used: f64,
}

impl BinaryPromptMask {
    pub fn foreground(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointLabel {
    Positive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub row: usize,
    pub col: usize,
    pub label: PointLabel,
}

impl Point {
    pub fn positive(row: usize, col: usize) -> Self {
        Self { row, col, label: PointLabel::Positive }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointPrompts {
    pub points: Vec<Point>,
    /// Set when the mask was empty and points came from the top-K of the similarity map.
    pub fallback: bool,
}

impl PointPrompts {
    pub fn k(&self) -> usize {
        self.points.len()
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        for p in &self.points {
            if p.row >= height || p.col >= width {
                return Err(Error::input(format!(
                    "point ({}, {}) outside {}x{} image",
                    p.row, p.col, height, width
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensePrompt {
    pub values: Array2<u8>,
}

/// `s_p = <V_p / |V_p|, t / |t|>`. Zero patch rows score 0; a zero text vector is an error.
pub fn cosine_similarity_map(v: &PatchEmbeddings, t: &TextEmbedding) -> Result<SimilarityScores> {
    if v.channels() != t.values.len() {
        return Err(Error::input(format!(
            "patch embeddings have {} channels, text embedding {}",
            v.channels(),
            t.values.len()
        )));
    }
    let tn = t.values.dot(&t.values).sqrt();
    if tn == 0.0 || !tn.is_finite() {
        return Err(Error::input("text embedding has zero norm"));
    }
    let tu = &t.values / tn;
    let values = v
        .values
        .rows()
        .into_iter()
        .map(|row| {
            let n = row.dot(&row).sqrt().max(NORM_EPS);
            (row.dot(&tu) / n).clamp(-1.0, 1.0)
        })
        .collect();
    Ok(SimilarityScores { values })
}

/// Batched cosine scores for the model: `v (B, N, C)`, `t (B, C) -> (B, N)`.
pub fn cosine_scores(v: &Tensor, t: &Tensor) -> Result<Tensor> {
    let vn = v.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.maximum(NORM_EPS)?;
    let tn = t.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.maximum(NORM_EPS)?;
    let v = v.broadcast_div(&vn)?;
    let t = t.broadcast_div(&tn)?;
    Ok(v.broadcast_mul(&t.unsqueeze(1)?)?.sum(D::Minus1)?)
}

/// Row-major reshape to `grid`, bilinear upsample to `out_size`, then min-max normalize.
pub fn similarity_to_map(s: &SimilarityScores, grid: (usize, usize), out_size: (usize, usize)) -> Result<SimilarityMap> {
    if s.values.len() != grid.0 * grid.1 {
        return Err(Error::input(format!(
            "{} scores do not fill a {}x{} grid",
            s.values.len(),
            grid.0,
            grid.1
        )));
    }
    let raw = Array2::from_shape_vec(grid, s.values.clone()).expect("length checked");
    let up = resize_bilinear(raw.view(), out_size);
    let (lo, hi) = up
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let values = if hi > lo {
        up.mapv(|x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0))
    } else {
        Array2::zeros(out_size)
    };
    Ok(SimilarityMap { values, normalized: true })
}

pub fn threshold_map(map: &SimilarityMap, tau: f64) -> Result<BinaryPromptMask> {
    if !map.normalized {
        return Err(Error::input("threshold requires a normalized similarity map"));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::input(format!("threshold {tau} outside (0, 1)")));
    }
    Ok(BinaryPromptMask {
        values: map.values.mapv(|x| u8::from(x >= tau)),
        threshold_used: tau,
    })
}

fn foreground_pixels(mask: ArrayView2<u8>) -> Vec<(usize, usize)> {
    mask.indexed_iter().filter(|(_, &v)| v != 0).map(|(ij, _)| ij).collect()
}

fn draw(fg: &[(usize, usize)], k: usize, seed: u64) -> Vec<Point> {
    let mut rng = substream(seed, "points");
    let mut picked: Vec<(usize, usize)> = if fg.len() >= k {
        sample(&mut rng, fg.len(), k).into_iter().map(|i| fg[i]).collect()
    } else {
        let mut all = fg.to_vec();
        while all.len() < k {
            all.push(fg[rng.random_range(0..fg.len())]);
        }
        all
    };
    if fg.len() < k {
        use rand::seq::SliceRandom;
        picked.shuffle(&mut rng);
    }
    picked.into_iter().map(|(r, c)| Point::positive(r, c)).collect()
}

/// K positive points from the mask foreground; top-K of `fallback` when the mask is empty.
pub fn sample_points(mask: &BinaryPromptMask, k: usize, seed: u64, fallback: &SimilarityMap) -> Result<PointPrompts> {
    if k == 0 {
        return Err(Error::input("K must be at least 1"));
    }
    let fg = foreground_pixels(mask.values.view());
    if !fg.is_empty() {
        return Ok(PointPrompts { points: draw(&fg, k, seed), fallback: false });
    }
    if fallback.values.dim() != mask.values.dim() {
        return Err(Error::input("fallback map and prompt mask differ in size"));
    }
    let mut ranked: Vec<((usize, usize), f64)> = fallback.values.indexed_iter().map(|(ij, &v)| (ij, v)).collect();
    // stable sort keeps row-major order among ties
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    let n = ranked.len();
    let points = (0..k).map(|i| {
        let (r, c) = ranked[i % n].0;
        Point::positive(r, c)
    });
    Ok(PointPrompts { points: points.collect(), fallback: true })
}

pub fn sample_points_from_gt(gt: ArrayView2<u8>, k: usize, seed: u64) -> Result<PointPrompts> {
    if k == 0 {
        return Err(Error::input("K must be at least 1"));
    }
    let fg = foreground_pixels(gt);
    if fg.is_empty() {
        return Err(Error::input("ground-truth mask is empty; no points to sample"));
    }
    Ok(PointPrompts { points: draw(&fg, k, seed), fallback: false })
}

pub fn make_dense_prompt(mask: &BinaryPromptMask, resolution: (usize, usize)) -> DensePrompt {
    DensePrompt { values: resize_nearest(mask.values.view(), resolution) }
}

fn save_gray(path: &Path, values: &Array2<u8>) -> Result<()> {
    let (h, w) = values.dim();
    let img = image::GrayImage::from_raw(w as u32, h as u32, values.iter().copied().collect())
        .ok_or_else(|| Error::Internal("gray image buffer size".into()))?;
    img.save(path).map_err(|e| Error::io(path, e))
}

/// Writes `similarity.png`, `mask.png` and `points.json` into `dir`.
pub fn export_debug(dir: &Path, map: &SimilarityMap, mask: &BinaryPromptMask, points: &PointPrompts) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_gray(&dir.join("similarity.png"), &map.values.mapv(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8))?;
    save_gray(&dir.join("mask.png"), &mask.values.mapv(|x| x * 255))?;
    let path = dir.join("points.json");
    let json = serde_json::to_string_pretty(points)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn pe(rows: Vec<Vec<f64>>) -> PatchEmbeddings {
        let n = rows.len();
        let c = rows[0].len();
        PatchEmbeddings::new(
            Array2::from_shape_vec((n, c), rows.into_iter().flatten().collect()).unwrap(),
            (1, n),
        )
        .unwrap()
    }

    #[test]
    fn identical_and_orthogonal_vectors() {
        let t = TextEmbedding::new(Array1::from(vec![1.0, 2.0, 0.0])).unwrap();
        let v = pe(vec![vec![1.0, 2.0, 0.0], vec![-2.0, 1.0, 0.0], vec![0.0, 0.0, 0.0]]);
        let s = cosine_similarity_map(&v, &t).unwrap();
        assert!((s.values[0] - 1.0).abs() < 1e-15);
        assert_eq!(s.values[1], 0.0);
        assert_eq!(s.values[2], 0.0);
    }

    #[test]
    fn zero_text_vector_is_rejected() {
        let t = TextEmbedding { values: Array1::zeros(3) };
        let v = pe(vec![vec![1.0, 2.0, 0.0]]);
        assert!(matches!(cosine_similarity_map(&v, &t), Err(Error::Input(_))));
    }

    #[test]
    fn constant_scores_give_zero_map() {
        let s = SimilarityScores { values: vec![0.3; 4] };
        let m = similarity_to_map(&s, (2, 2), (5, 5)).unwrap();
        assert!(m.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_by_two_upsample_matches_hand_bilinear() {
        let s = SimilarityScores { values: vec![0.0, 1.0, 0.0, 1.0] };
        let m = similarity_to_map(&s, (2, 2), (4, 4)).unwrap();
        let row = [0.0, 0.25, 0.75, 1.0];
        for r in 0..4 {
            for c in 0..4 {
                assert!((m.values[[r, c]] - row[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn threshold_definition_and_errors() {
        let m = SimilarityMap { values: array![[0.2, 0.8]], normalized: true };
        assert_eq!(threshold_map(&m, 0.5).unwrap().values, array![[0u8, 1]]);
        assert!(threshold_map(&m, 1.0).is_err());
        let raw = SimilarityMap { values: array![[0.2, 0.8]], normalized: false };
        assert!(threshold_map(&raw, 0.5).is_err());
    }

    #[test]
    fn sparse_mask_uses_every_foreground_pixel() {
        let mut b = Array2::zeros((6, 6));
        b[[0, 1]] = 1;
        b[[3, 3]] = 1;
        b[[5, 0]] = 1;
        let mask = BinaryPromptMask { values: b, threshold_used: 0.5 };
        let fb = SimilarityMap { values: Array2::zeros((6, 6)), normalized: true };
        let p = sample_points(&mask, 5, 1, &fb).unwrap();
        assert_eq!(p.k(), 5);
        let uniq: std::collections::BTreeSet<_> = p.points.iter().map(|p| (p.row, p.col)).collect();
        assert_eq!(uniq, [(0, 1), (3, 3), (5, 0)].into_iter().collect());
        assert!(!p.fallback);
    }

    #[test]
    fn empty_mask_falls_back_to_top_k() {
        let mask = BinaryPromptMask { values: Array2::zeros((4, 5)), threshold_used: 0.5 };
        let mut fb = Array2::zeros((4, 5));
        fb[[2, 3]] = 1.0;
        fb[[0, 4]] = 0.5;
        fb[[1, 0]] = 0.5;
        let fb = SimilarityMap { values: fb, normalized: true };
        let p = sample_points(&mask, 3, 0, &fb).unwrap();
        assert!(p.fallback);
        assert_eq!(
            p.points.iter().map(|p| (p.row, p.col)).collect::<Vec<_>>(),
            vec![(2, 3), (0, 4), (1, 0)]
        );
    }

    #[test]
    fn gt_sampling_is_seeded_and_distinct() {
        let mut gt = Array2::zeros((20, 20));
        gt.slice_mut(ndarray::s![5..15, 5..15]).fill(1u8);
        let a = sample_points_from_gt(gt.view(), 5, 3).unwrap();
        let b = sample_points_from_gt(gt.view(), 5, 3).unwrap();
        assert_eq!(a, b);
        let uniq: std::collections::BTreeSet<_> = a.points.iter().map(|p| (p.row, p.col)).collect();
        assert_eq!(uniq.len(), 5);
        assert!(a.points.iter().all(|p| gt[[p.row, p.col]] == 1));
        assert!(sample_points_from_gt(Array2::zeros((3, 3)).view(), 1, 0).is_err());
    }

    #[test]
    fn batched_scores_match_plain_scores() {
        let v = pe(vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![3.0, -4.0]]);
        let t = TextEmbedding::new(Array1::from(vec![0.3, -0.7])).unwrap();
        let plain = cosine_similarity_map(&v, &t).unwrap();
        let vt = Tensor::from_vec(v.values.iter().copied().collect::<Vec<_>>(), (1, 3, 2), &candle_core::Device::Cpu).unwrap();
        let tt = Tensor::from_vec(t.values.to_vec(), (1, 2), &candle_core::Device::Cpu).unwrap();
        let batched = cosine_scores(&vt, &tt).unwrap().squeeze(0).unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in plain.values.iter().zip(batched) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn debug_export_writes_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let map = SimilarityMap { values: array![[0.0, 1.0]], normalized: true };
        let mask = threshold_map(&map, 0.5).unwrap();
        let pts = PointPrompts { points: vec![Point::positive(0, 1)], fallback: false };
        export_debug(dir.path(), &map, &mask, &pts).unwrap();
        for f in ["similarity.png", "mask.png", "points.json"] {
            assert!(dir.path().join(f).exists());
        }
    }
}
