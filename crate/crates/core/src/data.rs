//! Synthetic shape datasets, label-fraction splits and sample loading.
//!
//! Layout on disk:
//!
//! ```text
//! <root>/manifest.json
//! <root>/images/<id>.png          RGB, 8-bit
//! <root>/masks/<class>/<id>.png   single channel, 0 or 255
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

pub const SHAPE_CLASSES: [&str; 6] = ["circle", "square", "triangle", "cross", "ring", "bar"];
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(H, W, 3)` in `[0, 1]`.
    pub image: Array3<f32>,
    /// Binary masks of the classes present.
    pub masks: BTreeMap<String, Array2<u8>>,
}

impl Sample {
    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.masks.keys().map(|s| s.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n: usize,
    pub classes: Vec<String>,
    pub size: usize,
    pub camouflage: bool,
    pub seed: u64,
    #[serde(default = "default_max_shapes")]
    pub max_shapes: usize,
}

fn default_max_shapes() -> usize {
    3
}

impl GeneratorConfig {
    pub fn new(n: usize, classes: &[&str], size: usize, camouflage: bool, seed: u64) -> Self {
        Self {
            n,
            classes: classes.iter().map(|s| s.to_string()).collect(),
            size,
            camouflage,
            seed,
            max_shapes: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::input("dataset needs at least one sample"));
        }
        if self.classes.is_empty() {
            return Err(Error::input("dataset needs at least one class"));
        }
        for c in &self.classes {
            if !SHAPE_CLASSES.contains(&c.as_str()) {
                return Err(Error::input(format!("unknown shape class '{c}' (known: {})", SHAPE_CLASSES.join(", "))));
            }
        }
        let uniq: BTreeSet<_> = self.classes.iter().collect();
        if uniq.len() != self.classes.len() {
            return Err(Error::input("duplicate class names"));
        }
        if self.size < 32 {
            return Err(Error::input("image size must be at least 32 pixels"));
        }
        if self.max_shapes == 0 {
            return Err(Error::input("max_shapes must be at least 1"));
        }
        Ok(())
    }
}

/// Whether `(x, y)`, relative to the shape center and rotated into its frame, lies inside.
fn inside(class: &str, x: f64, y: f64, r: f64) -> bool {
    let d = (x * x + y * y).sqrt();
    match class {
        "circle" => d <= r,
        "square" => x.abs() <= 0.8 * r && y.abs() <= 0.8 * r,
        "triangle" => {
            // equilateral, circumradius r, apex up
            let h = 1.5 * r;
            let yb = y + 0.5 * r;
            yb >= 0.0 && yb <= h && x.abs() <= (h - yb) / 3f64.sqrt()
        }
        "cross" => (x.abs() <= r && y.abs() <= 0.3 * r) || (y.abs() <= r && x.abs() <= 0.3 * r),
        "ring" => d <= r && d >= 0.55 * r,
        "bar" => x.abs() <= r && y.abs() <= 0.3 * r,
        _ => false,
    }
}

fn rasterize(class: &str, size: usize, cx: f64, cy: f64, r: f64, theta: f64) -> Array2<u8> {
    let (s, c) = theta.sin_cos();
    Array2::from_shape_fn((size, size), |(row, col)| {
        let dx = col as f64 + 0.5 - cx;
        let dy = row as f64 + 0.5 - cy;
        let x = c * dx + s * dy;
        let y = -s * dx + c * dy;
        u8::from(inside(class, x, y, r))
    })
}

fn dilate(mask: &Array2<u8>, radius: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    let mut out = Array2::zeros((h, w));
    for ((r, c), &v) in mask.indexed_iter() {
        if v == 0 {
            continue;
        }
        for rr in r.saturating_sub(radius)..(r + radius + 1).min(h) {
            for cc in c.saturating_sub(radius)..(c + radius + 1).min(w) {
                out[[rr, cc]] = 1;
            }
        }
    }
    out
}

fn quantize(x: f64) -> f32 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)]
}

const TEXTURE_AMPLITUDE: f64 = 0.12;

/// Stripe orientation and period (pixels) painted onto every shape of a class.
fn class_texture(class: &str) -> (f64, f64) {
    let idx = SHAPE_CLASSES.iter().position(|c| *c == class).unwrap_or(0);
    ((idx % 4) as f64 * PI / 4.0, if idx < 4 { 4.0 } else { 8.0 })
}

/// Deterministic in `(cfg.seed, index)` only.
pub fn generate_sample(cfg: &GeneratorConfig, index: usize) -> Sample {
    let mut rng = substream(cfg.seed, &format!("sample/{index}"));
    let size = cfg.size;
    let n_shapes = rng.random_range(1..=cfg.max_shapes.min(cfg.classes.len()));
    let mut classes: Vec<&String> = cfg.classes.iter().collect();
    classes.shuffle(&mut rng);
    classes.truncate(n_shapes);

    let mut occupied = Array2::<u8>::zeros((size, size));
    let mut masks = BTreeMap::new();
    for class in classes {
        for _ in 0..60 {
            let r = rng.random_range(0.13..0.2) * size as f64;
            let margin = r + 2.0;
            let cx = rng.random_range(margin..size as f64 - margin);
            let cy = rng.random_range(margin..size as f64 - margin);
            let theta = rng.random_range(0.0..2.0 * PI);
            let m = rasterize(class, size, cx, cy, r, theta);
            let grown = dilate(&m, 2);
            if grown.iter().zip(occupied.iter()).any(|(&a, &b)| a == 1 && b == 1) {
                continue;
            }
            occupied.zip_mut_with(&m, |o, &v| *o |= v);
            masks.insert(class.clone(), m);
            break;
        }
    }

    let bg = random_color(&mut rng);
    let freq = [rng.random_range(0.05..0.3), rng.random_range(0.05..0.3)];
    let phase = rng.random_range(0.0..2.0 * PI);
    let mut image = Array3::<f64>::zeros((size, size, 3));
    for r in 0..size {
        for c in 0..size {
            let wave = 0.06 * (freq[0] * c as f64 + freq[1] * r as f64 + phase).sin();
            for ch in 0..3 {
                image[[r, c, ch]] = bg[ch] + wave + rng.random_range(-0.08..0.08);
            }
        }
    }
    for (class, m) in &masks {
        let (angle, period) = class_texture(class);
        let (sa, ca) = angle.sin_cos();
        let fg = if cfg.camouflage {
            let mut col = [0.0; 3];
            for ch in 0..3 {
                col[ch] = bg[ch] + rng.random_range(-0.06..0.06);
            }
            col
        } else {
            loop {
                let col = random_color(&mut rng);
                let diff: f64 = (0..3).map(|i| (col[i] - bg[i]).abs()).sum::<f64>() / 3.0;
                if diff >= 0.2 {
                    break col;
                }
            }
        };
        for ((r, c), &v) in m.indexed_iter() {
            if v == 1 {
                let stripe = TEXTURE_AMPLITUDE * (2.0 * PI * (c as f64 * ca + r as f64 * sa) / period).sin();
                for ch in 0..3 {
                    image[[r, c, ch]] = fg[ch] + stripe + rng.random_range(-0.05..0.05);
                }
            }
        }
    }
    Sample { id: format!("{index:05}"), image: image.mapv(quantize), masks }
}

pub fn generate_samples(cfg: &GeneratorConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    Ok((0..cfg.n).map(|i| generate_sample(cfg, i)).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub image: String,
    /// Class name to mask file, relative to the root.
    pub masks: BTreeMap<String, String>,
    pub classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    /// Directory holding the manifest; file paths below are relative to it.
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub generator: GeneratorConfig,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::io(&path, format!("invalid manifest: {e}")))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::VersionMismatch { found: m.version, expected: MANIFEST_VERSION });
        }
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn entry(&self, id: &str) -> Result<&SampleEntry> {
        self.samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::input(format!("sample '{id}' is not in the manifest")))
    }

    /// Checks files exist and class names belong to the vocabulary.
    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            let files = std::iter::once(&s.image).chain(s.masks.values());
            for f in files {
                let p = self.root.join(f);
                if !p.exists() {
                    return Err(Error::io(&p, "file listed in manifest does not exist"));
                }
            }
            for c in s.masks.keys() {
                if !self.classes.contains(c) {
                    return Err(Error::input(format!("sample {} uses class '{c}' outside the vocabulary", s.id)));
                }
            }
        }
        Ok(())
    }
}

fn save_png_rgb(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (h, w, _) = image.dim();
    let raw: Vec<u8> = image.iter().map(|&x| (x * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("rgb buffer size");
    img.save(path).map_err(|e| Error::io(path, e))
}

fn save_png_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.iter().map(|&x| if x != 0 { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, raw).expect("mask buffer size");
    img.save(path).map_err(|e| Error::io(path, e))
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes images, masks and `manifest.json` under `root`.
pub fn generate_synthetic_dataset(root: &Path, cfg: &GeneratorConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    create_dir(&root.join("images"))?;
    for c in &cfg.classes {
        create_dir(&root.join("masks").join(c))?;
    }
    let mut samples = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let s = generate_sample(cfg, i);
        let image = format!("images/{}.png", s.id);
        save_png_rgb(&root.join(&image), &s.image)?;
        let mut masks = BTreeMap::new();
        for (class, m) in &s.masks {
            let rel = format!("masks/{class}/{}.png", s.id);
            save_png_mask(&root.join(&rel), m)?;
            masks.insert(class.clone(), rel);
        }
        let classes = cfg.classes.iter().filter(|c| s.masks.contains_key(*c)).cloned().collect();
        samples.push(SampleEntry { id: s.id, image, masks, classes });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        root: root.to_path_buf(),
        classes: cfg.classes.clone(),
        generator: cfg.clone(),
        samples,
    };
    manifest.save()?;
    Ok(manifest)
}

pub fn load_sample(manifest: &DatasetManifest, id: &str) -> Result<Sample> {
    let entry = manifest.entry(id)?;
    let path = manifest.root.join(&entry.image);
    let img = image::open(&path).map_err(|e| Error::io(&path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let image = Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
        .expect("rgb buffer shape");
    let mut masks = BTreeMap::new();
    for (class, rel) in &entry.masks {
        let path = manifest.root.join(rel);
        let m = image::open(&path).map_err(|e| Error::io(&path, e))?.to_luma8();
        if m.dimensions() != (w, h) {
            return Err(Error::io(&path, format!("mask is {:?}, image is {:?}", m.dimensions(), (w, h))));
        }
        let raw = m.into_raw();
        if raw.iter().any(|&v| v != 0 && v != 255) {
            return Err(Error::io(&path, "mask is not binary"));
        }
        masks.insert(
            class.clone(),
            Array2::from_shape_vec((h as usize, w as usize), raw.into_iter().map(|v| u8::from(v == 255)).collect())
                .expect("mask buffer shape"),
        );
    }
    Ok(Sample { id: id.to_string(), image, masks })
}

pub fn load_samples(manifest: &DatasetManifest, ids: &[String]) -> Result<Vec<Sample>> {
    ids.iter().map(|id| load_sample(manifest, id)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    /// Path of the parent dataset manifest.
    pub parent: PathBuf,
    pub fraction: f64,
    pub seed: u64,
    /// Included sample ids in parent order.
    pub ids: Vec<String>,
}

impl SplitManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::io(path, format!("invalid split manifest: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `max(1, round_half_up(fraction * n))`
pub fn split_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 + 0.5).floor() as usize).clamp(1, n.max(1))
}

/// Prefix of one seeded permutation, so smaller fractions nest inside larger ones.
pub fn make_split(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<SplitManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::input(format!("split fraction {fraction} outside (0, 1]")));
    }
    let ids = manifest.ids();
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut substream(seed, "split"));
    let keep: BTreeSet<usize> = order.into_iter().take(split_count(ids.len(), fraction)).collect();
    Ok(SplitManifest {
        parent: manifest.root.join(MANIFEST_FILE),
        fraction,
        seed,
        ids: keep.into_iter().map(|i| ids[i].clone()).collect(),
    })
}

/// Samples of a dataset directory, a `manifest.json` file, or a split manifest.
pub fn load_collection(path: &Path) -> Result<Vec<Sample>> {
    let is_split = path.is_file() && path.file_name().is_some_and(|n| n != MANIFEST_FILE);
    if is_split {
        let split = SplitManifest::load(path)?;
        let manifest = DatasetManifest::load(&split.parent)?;
        load_samples(&manifest, &split.ids)
    } else {
        let manifest = DatasetManifest::load(path)?;
        load_samples(&manifest, &manifest.ids())
    }
}
