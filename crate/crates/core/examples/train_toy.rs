//! Trains the toy model on generated shapes and reports validation metrics.
//!
//! cargo run --example train_toy -p clipsam -- [epochs] [seed] [mode] [n_train] [lr] [full|none]

use clipsam::conditioning::Modalities;
use clipsam::data::{generate_samples, GeneratorConfig};
use clipsam::evaluation::evaluate;
use clipsam::model::TOY_CLASSES;
use clipsam::training::{train, TrainConfig};
use clipsam::{ModelConfig, PromptMode};

fn main() -> clipsam::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mode: PromptMode = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(PromptMode::SemiAutomatic);
    let n_train = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(200);
    let lr = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let modalities = match args.get(6).map(String::as_str) {
        Some("none") => Modalities::NONE,
        _ => Modalities::FULL,
    };

    let train_set = generate_samples(&GeneratorConfig::new(n_train, &TOY_CLASSES, 96, false, seed))?;
    let val_set = generate_samples(&GeneratorConfig::new(50, &TOY_CLASSES, 96, false, seed + 1000))?;
    let cfg = TrainConfig { epochs, seed, mode, lr, modalities, ..TrainConfig::default() };
    let model = ModelConfig::toy();

    let start = std::time::Instant::now();
    let out = train(&model, &cfg, &train_set, &val_set, |rec| {
        println!(
            "epoch {:>2}  loss {:.4} (bce {:.4} dice {:.4} iou {:.4})  val mIoU {:.4}  [{:.1}s]",
            rec.epoch,
            rec.loss.total,
            rec.loss.bce,
            rec.loss.dice,
            rec.loss.iou,
            rec.val_miou.unwrap_or(f64::NAN),
            start.elapsed().as_secs_f64()
        );
    })?;
    let metrics = evaluate(&out.model, &val_set, PromptMode::SemiAutomatic, &cfg.eval_config())?;
    println!("best epoch {}", out.best_epoch);
    print!("{}", metrics.record.summary_table());
    Ok(())
}
