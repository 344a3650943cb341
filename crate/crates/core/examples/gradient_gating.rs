//! Gradient norms per parameter group with and without semantic adapters.

use clipsam::data::{generate_samples, GeneratorConfig};
use clipsam::model::TOY_CLASSES;
use clipsam::training::{check_gradient_gating, PipelineItem, PromptConfig};
use clipsam::{Architecture, ClipGuidedSam, ModelConfig, PromptMode};

fn main() -> clipsam::Result<()> {
    let cfg = ModelConfig::toy();
    let samples = generate_samples(&GeneratorConfig::new(2, &TOY_CLASSES, 96, false, 1))?;
    let items: Vec<PipelineItem> = samples
        .iter()
        .map(|s| {
            let (class, gt) = s.masks.iter().next().expect("every sample has a shape");
            PipelineItem { image: &s.image, class, gt: Some(gt.view()), user_points: None, seed: 0 }
        })
        .collect();
    for s in [0, cfg.seg_encoder.depth] {
        let plan = cfg.budget(cfg.vision_encoder.depth, s, true)?;
        let model = ClipGuidedSam::new(&cfg, &Architecture { plan, modalities: Default::default() }, 0)?;
        model.store().perturb(|n| n.contains(".up."), 0.05, 1)?;
        let r = check_gradient_gating(&model, &items, PromptMode::SemiAutomatic, &PromptConfig::default())?;
        println!("S = {s}: vision {:.3e}  text {:.3e}", r.vision_total, r.text);
        for (group, norm) in &r.groups {
            println!("  {group:?}: {norm:.3e}");
        }
    }
    Ok(())
}
