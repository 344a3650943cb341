//! BCE, Dice and IoU terms as a prediction sharpens toward the ground truth.

use candle_core::{Device, Tensor};
use clipsam::training::{segmentation_loss, LossSwitches};

fn main() -> clipsam::Result<()> {
    let gt: Vec<f32> = (0..64).map(|i| f32::from(u8::from((i / 8) >= 2 && (i / 8) < 6 && (i % 8) >= 2 && (i % 8) < 6))).collect();
    let g = Tensor::from_vec(gt.clone(), (8, 8), &Device::Cpu)?;
    println!("{:>6} {:>8} {:>8} {:>8} {:>8}", "scale", "bce", "dice", "iou", "total");
    for scale in [0.0f32, 0.5, 1.0, 2.0, 4.0, 8.0] {
        let z: Vec<f32> = gt.iter().map(|&v| scale * (2.0 * v - 1.0)).collect();
        let out = segmentation_loss(&Tensor::from_vec(z, (8, 8), &Device::Cpu)?, &g, LossSwitches::ALL)?.values()?;
        println!("{scale:>6.1} {:>8.4} {:>8.4} {:>8.4} {:>8.4}", out.bce, out.dice, out.iou, out.total);
    }
    Ok(())
}
