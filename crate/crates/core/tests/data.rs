use std::collections::BTreeMap;

use clipsam::data::{
    generate_samples, generate_synthetic_dataset, load_collection, load_sample, make_split, split_count,
    DatasetManifest, GeneratorConfig, MANIFEST_FILE, SHAPE_CLASSES,
};
use proptest::prelude::*;

fn config(n: usize, seed: u64) -> GeneratorConfig {
    GeneratorConfig::new(n, &SHAPE_CLASSES[..4], 48, false, seed)
}

#[test]
fn generation_is_deterministic_and_seed_dependent() {
    let a = generate_samples(&config(5, 1)).unwrap();
    let b = generate_samples(&config(5, 1)).unwrap();
    let c = generate_samples(&config(5, 2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a[0].image, c[0].image);
}

#[test]
fn masks_are_binary_disjoint_and_nonempty() {
    for s in generate_samples(&config(20, 3)).unwrap() {
        assert!(!s.masks.is_empty());
        let mut union = ndarray::Array2::<u8>::zeros((48, 48));
        for m in s.masks.values() {
            assert!(m.iter().all(|&v| v <= 1));
            assert!(m.iter().any(|&v| v == 1));
            union.zip_mut_with(m, |u, &v| *u += v);
        }
        assert!(union.iter().all(|&v| v <= 1), "overlapping shapes in {}", s.id);
        assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn classes_appear_evenly() {
    let samples = generate_samples(&config(200, 4)).unwrap();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in &samples {
        for c in s.masks.keys() {
            *counts.entry(c.clone()).or_default() += 1;
        }
    }
    let (lo, hi) = (counts.values().min().unwrap(), counts.values().max().unwrap());
    assert_eq!(counts.len(), 4);
    assert!(*hi as f64 <= *lo as f64 * 1.5, "{counts:?}");
}

#[test]
fn invalid_generator_configs_are_rejected() {
    let mut cfg = config(2, 0);
    cfg.size = 4;
    assert!(generate_samples(&cfg).is_err());
    let cfg = GeneratorConfig::new(2, &["hexagon"], 48, false, 0);
    assert!(generate_samples(&cfg).is_err());
}

#[test]
fn dataset_directory_round_trips_through_png() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(4, 5);
    let manifest = generate_synthetic_dataset(dir.path(), &cfg).unwrap();
    let direct = generate_samples(&cfg).unwrap();
    for s in &direct {
        assert_eq!(&load_sample(&manifest, &s.id).unwrap(), s);
    }
    assert_eq!(DatasetManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap(), manifest);
    assert_eq!(load_collection(dir.path()).unwrap(), direct);
}

#[test]
fn splits_nest_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic_dataset(dir.path(), &config(32, 6)).unwrap();
    let mut prev: Option<Vec<String>> = None;
    for f in [1.0 / 16.0, 1.0 / 8.0, 0.25, 0.5, 1.0] {
        let split = make_split(&manifest, f, 9).unwrap();
        assert_eq!(split.ids.len(), split_count(32, f));
        if let Some(p) = &prev {
            assert!(p.iter().all(|id| split.ids.contains(id)), "fraction {f} does not contain the smaller split");
        }
        prev = Some(split.ids.clone());
    }
    let split = make_split(&manifest, 0.25, 9).unwrap();
    let path = dir.path().join("train_0.25.json");
    split.save(&path).unwrap();
    let loaded = load_collection(&path).unwrap();
    assert_eq!(loaded.iter().map(|s| s.id.clone()).collect::<Vec<_>>(), split.ids);
    assert!(make_split(&manifest, 0.0, 9).is_err());
}

#[test]
fn missing_dataset_is_an_io_error() {
    assert!(matches!(load_collection(std::path::Path::new("/nonexistent/set")), Err(clipsam::Error::Io { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn split_count_is_bounded(n in 1usize..5000, f in 0.0001f64..=1.0) {
        let k = split_count(n, f);
        prop_assert!(k >= 1 && k <= n);
        prop_assert!((k as f64 - f * n as f64).abs() <= 1.0);
    }
}
