//! Similarity map, thresholded prompt mask and sampled point prompts for one image.
//!
//! cargo run --example similarity_prompts -p clipsam -- [class] [out_dir]

use clipsam::conditioning::Modalities;
use clipsam::data::{generate_sample, GeneratorConfig};
use clipsam::model::TOY_CLASSES;
use clipsam::semantic::{cosine_similarity_map, export_debug, sample_points, similarity_to_map, threshold_map};
use clipsam::{Architecture, ClipGuidedSam, ModelConfig};

fn main() -> clipsam::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let class = args.get(1).map_or("circle", String::as_str);
    let out = args.get(2).map_or("similarity_debug", String::as_str);

    let cfg = ModelConfig::toy();
    let model = ClipGuidedSam::new(&cfg, &Architecture { plan: cfg.full_budget(), modalities: Modalities::FULL }, 0)?;
    let sample = generate_sample(&GeneratorConfig::new(1, &TOY_CLASSES, 96, false, 4), 0);

    let v = model.encode_image_vl(&sample.image)?;
    let t = model.encode_text(class)?;
    let scores = cosine_similarity_map(&v, &t)?;
    let map = similarity_to_map(&scores, v.grid, cfg.image_size())?;
    let mask = threshold_map(&map, 0.5)?;
    let points = sample_points(&mask, 5, 0, &map)?;

    let (lo, hi) = scores.values.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
    println!("patch grid {:?}, raw cosine range [{lo:.3}, {hi:.3}]", v.grid);
    println!("prompt mask covers {} of {} pixels", mask.foreground(), 96 * 96);
    for p in &points.points {
        println!("  point ({}, {})", p.row, p.col);
    }
    if points.fallback {
        println!("mask was empty; points are the top of the similarity map");
    }
    export_debug(std::path::Path::new(out), &map, &mask, &points)?;
    println!("wrote {out}/similarity.png, mask.png, points.json");
    Ok(())
}
