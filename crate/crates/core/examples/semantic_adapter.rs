//! One semantic adapter on hand-made tensors: F + U + T through a gated bottleneck.

use candle_core::{Device, Tensor};
use clipsam::conditioning::{fuse_vision_similarity, semantic_adapter_forward, Bottleneck};
use clipsam::nn::Linear;

fn main() -> clipsam::Result<()> {
    let dev = Device::Cpu;
    let (tokens, width, hidden) = (4, 6, 2);
    let f = Tensor::randn(0f32, 1.0, (tokens, width), &dev)?;
    let v = Tensor::randn(0f32, 1.0, (tokens, width), &dev)?;
    let s = Tensor::new(&[0.9f32, 0.1, -0.3, 0.5], &dev)?;
    let u = fuse_vision_similarity(&v, &s)?;
    let t = Tensor::randn(0f32, 1.0, (1, width), &dev)?.broadcast_as((tokens, width))?.contiguous()?;

    let down = Linear::from_tensors(Tensor::randn(0f32, 0.4, (hidden, width), &dev)?, None);
    let up = Linear::from_tensors(Tensor::randn(0f32, 0.4, (width, hidden), &dev)?, None);
    for gate in [0.0f32, 0.5, 1.0] {
        let adapter = Bottleneck::from_parts(down.clone(), up.clone(), Tensor::new(&[gate], &dev)?);
        let delta = semantic_adapter_forward(&f, &u, &t, &adapter)?;
        let norm = delta.sqr()?.sum_all()?.sqrt()?.to_scalar::<f32>()?;
        println!("gate {gate:.1}: |delta| = {norm:.4}");
    }
    Ok(())
}
