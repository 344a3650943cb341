//! Builds a /segment request body, runs it through the handler and decodes the response.

use clipsam::conditioning::Modalities;
use clipsam::data::{generate_sample, GeneratorConfig};
use clipsam::model::TOY_CLASSES;
use clipsam::service::{encode_png, rle_decode, SegmentRequest, Segmenter};
use clipsam::training::PromptConfig;
use clipsam::{Architecture, ClipGuidedSam, ModelConfig, PromptMode};

fn main() -> clipsam::Result<()> {
    let cfg = ModelConfig::toy();
    let model = ClipGuidedSam::new(&cfg, &Architecture { plan: cfg.full_budget(), modalities: Modalities::FULL }, 0)?;
    let seg = Segmenter::new(model, "toy-untrained", PromptConfig::default())?;
    let sample = generate_sample(&GeneratorConfig::new(1, &TOY_CLASSES, 96, false, 2), 0);
    let class = sample.masks.keys().next().expect("one shape").clone();

    for (mode, points) in [(PromptMode::SemiAutomatic, vec![]), (PromptMode::Manual, vec![[40, 40]])] {
        let req = SegmentRequest { image: encode_png(&sample.image)?, class: class.clone(), points, mode, seed: 0 };
        let body = serde_json::to_string(&req)?;
        let resp = seg.handle_segment(&req).map_err(|e| clipsam::Error::Internal(e.error))?;
        let mask = rle_decode(&resp.mask)?;
        println!(
            "{mode}: request {} bytes, mask {}x{} with {} foreground pixels, points {:?} ({:?})",
            body.len(),
            resp.mask.height,
            resp.mask.width,
            mask.iter().filter(|&&v| v == 1).count(),
            resp.points,
            resp.point_source
        );
    }
    let bad = SegmentRequest { image: encode_png(&sample.image)?, class: "zebra".into(), points: vec![], mode: PromptMode::SemiAutomatic, seed: 0 };
    let err = seg.handle_segment(&bad).unwrap_err();
    println!("unknown class -> HTTP {}: {}", err.status, serde_json::to_string(&err)?);
    Ok(())
}
