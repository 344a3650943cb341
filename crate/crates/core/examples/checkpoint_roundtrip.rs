//! Saves a model to a single safetensors file and reloads it.

use clipsam::checkpoint::{load_checkpoint, save_checkpoint};
use clipsam::conditioning::Modalities;
use clipsam::{Architecture, ClipGuidedSam, ModelConfig};

fn main() -> clipsam::Result<()> {
    let cfg = ModelConfig::toy();
    let model = ClipGuidedSam::new(&cfg, &Architecture { plan: cfg.budget(2, 1, true)?, modalities: Modalities::FULL }, 7)?;
    let path = std::env::temp_dir().join("clipsam_example.safetensors");
    save_checkpoint(&path, &model, serde_json::json!({"note": "example"}))?;
    let size = std::fs::metadata(&path).map_err(|e| clipsam::Error::io(&path, e))?.len();
    let (loaded, manifest) = load_checkpoint(&path)?;
    println!("{} ({size} bytes), format {} v{}", path.display(), manifest.format, manifest.version);
    println!("{} arrays, budget C={} S={}", manifest.kinds.len(), manifest.architecture.plan.c, manifest.architecture.plan.s);
    println!("weights identical: {}", loaded.store().snapshot()? == model.store().snapshot()?);
    Ok(())
}
