//! Segmentation metrics on a hand-built prediction, from perfect to shifted.

use clipsam::evaluation::{binary_iou, e_measure, mae, s_measure, weighted_fbeta};
use ndarray::Array2;

fn square(size: usize, top: usize, left: usize, side: usize) -> Array2<u8> {
    Array2::from_shape_fn((size, size), |(r, c)| u8::from(r >= top && r < top + side && c >= left && c < left + side))
}

fn main() -> clipsam::Result<()> {
    let gt = square(32, 8, 8, 12);
    println!("{:>5} {:>7} {:>7} {:>7} {:>7} {:>7}", "shift", "IoU", "MAE", "S", "E", "Fw");
    for shift in [0, 1, 2, 4, 8] {
        let pred = square(32, 8 + shift, 8 + shift, 12);
        let p = pred.mapv(f64::from);
        println!(
            "{shift:>5} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            binary_iou(pred.view(), gt.view())?,
            mae(p.view(), gt.view())?,
            s_measure(p.view(), gt.view())?,
            e_measure(p.view(), gt.view())?,
            weighted_fbeta(p.view(), gt.view())?,
        );
    }
    Ok(())
}
