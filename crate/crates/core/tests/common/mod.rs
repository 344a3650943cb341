#![allow(dead_code)]

use clipsam::conditioning::Modalities;
use clipsam::data::{generate_samples, GeneratorConfig, Sample};
use clipsam::model::TOY_CLASSES;
use clipsam::{Architecture, ClipGuidedSam, ModelConfig};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn toy_model(seed: u64) -> ClipGuidedSam {
    let cfg = ModelConfig::toy();
    let arch = Architecture { plan: cfg.full_budget(), modalities: Modalities::FULL };
    ClipGuidedSam::new(&cfg, &arch, seed).unwrap()
}

pub fn samples(n: usize, seed: u64) -> Vec<Sample> {
    generate_samples(&GeneratorConfig::new(n, &TOY_CLASSES, 96, false, seed)).unwrap()
}

pub fn random_image(seed: u64) -> Array3<f32> {
    let mut r = rng(seed);
    Array3::from_shape_fn((96, 96, 3), |_| r.random::<f32>())
}

pub fn random_mask(r: &mut impl Rng, h: usize, w: usize, p: f64) -> Array2<u8> {
    Array2::from_shape_fn((h, w), |_| u8::from(r.random_bool(p)))
}
