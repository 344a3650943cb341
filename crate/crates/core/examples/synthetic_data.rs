//! Writes a small shapes dataset with nested label-fraction splits.
//!
//! cargo run --example synthetic_data -p clipsam -- [out_dir] [n] [camouflage]

use clipsam::data::{generate_synthetic_dataset, make_split, GeneratorConfig, SHAPE_CLASSES};

fn main() -> clipsam::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = std::path::PathBuf::from(args.get(1).map_or("shapes", String::as_str));
    let n = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);
    let camouflage = args.get(3).is_some_and(|s| s == "camouflage");

    let cfg = GeneratorConfig::new(n, &SHAPE_CLASSES[..4], 96, camouflage, 0);
    let manifest = generate_synthetic_dataset(&out, &cfg)?;
    println!("{} samples in {}", manifest.samples.len(), out.display());
    let mut per_class = std::collections::BTreeMap::<&str, usize>::new();
    for s in &manifest.samples {
        for c in &s.classes {
            *per_class.entry(c.as_str()).or_default() += 1;
        }
    }
    println!("class occurrences: {per_class:?}");
    for f in [0.0625, 0.125, 0.25, 0.5] {
        let split = make_split(&manifest, f, 0)?;
        let path = out.join(format!("split_{f}.json"));
        split.save(&path)?;
        println!("{:>7}: {:>3} ids -> {}", f, split.ids.len(), path.display());
    }
    Ok(())
}
