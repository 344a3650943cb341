//! Parameter table for the ViT-B and toy presets, with a chosen co-adaptation budget.
//!
//! cargo run --example param_report -p clipsam -- [C] [S]

use clipsam::training::{parameter_report, BudgetConfig, TrainConfig};
use clipsam::ModelConfig;

fn main() -> clipsam::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let c = args.get(1).and_then(|s| s.parse().ok());
    let s = args.get(2).and_then(|s| s.parse().ok());
    let cfg = TrainConfig { budget: BudgetConfig { c, s, regular_adapters: true }, ..TrainConfig::default() };
    for (name, model) in [("vit-b", ModelConfig::vit_b()), ("toy", ModelConfig::toy())] {
        let report = parameter_report(&model, &cfg)?;
        println!("== {name}");
        print!("{}", report.table());
        println!(
            "adapters {:.2}M ({:.1}% of the image encoder backbone)\n",
            report.adapter_count as f64 / 1e6,
            report.adapter_overhead_pct
        );
    }
    Ok(())
}
