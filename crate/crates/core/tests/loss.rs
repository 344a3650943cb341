use candle_core::{Device, Tensor};
use clipsam::training::{segmentation_loss, LossSwitches};
use proptest::prelude::*;

mod common;

fn t(v: Vec<f64>, h: usize, w: usize) -> Tensor {
    Tensor::from_vec(v, (h, w), &Device::Cpu).unwrap()
}

fn oracle(z: &[f64], g: &[f64]) -> (f64, f64, f64) {
    let n = z.len() as f64;
    let mut bce = 0.0;
    let (mut pg, mut ps, mut gs) = (0.0, 0.0, 0.0);
    for (&zi, &gi) in z.iter().zip(g) {
        let zc = zi.clamp(-15.0, 15.0);
        let p = 1.0 / (1.0 + (-zc).exp());
        bce += -(gi * p.ln() + (1.0 - gi) * (1.0 - p).ln());
        pg += p * gi;
        ps += p;
        gs += gi;
    }
    let dice = 1.0 - (2.0 * pg + 1.0) / (ps + gs + 1.0);
    let iou = 1.0 - (pg + 1.0) / (ps + gs - pg + 1.0);
    (bce / n, dice, iou)
}

#[test]
fn uniform_half_probability_gives_ln2_bce() {
    let mut r = common::rng(1);
    let g: Vec<f64> = common::random_mask(&mut r, 8, 8, 0.3).iter().map(|&v| f64::from(v)).collect();
    let out = segmentation_loss(&t(vec![0.0; 64], 8, 8), &t(g, 8, 8), LossSwitches::ALL).unwrap();
    let v = out.values().unwrap();
    assert!((v.bce - std::f64::consts::LN_2).abs() < 1e-9, "{}", v.bce);
}

#[test]
fn saturated_perfect_prediction_zeroes_overlap_terms() {
    let g: Vec<f64> = (0..64).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
    let z: Vec<f64> = g.iter().map(|&v| if v > 0.5 { 1e6 } else { -1e6 }).collect();
    let v = segmentation_loss(&t(z, 8, 8), &t(g, 8, 8), LossSwitches::ALL).unwrap().values().unwrap();
    assert!(v.dice < 1e-5 && v.iou < 1e-5, "{v:?}");
}

#[test]
fn random_cases_match_scalar_loop() {
    let mut r = common::rng(2);
    for _ in 0..20 {
        let z: Vec<f64> = (0..64).map(|_| rand::Rng::random_range(&mut r, -20.0..20.0)).collect();
        let g: Vec<f64> = common::random_mask(&mut r, 8, 8, 0.4).iter().map(|&v| f64::from(v)).collect();
        let v = segmentation_loss(&t(z.clone(), 8, 8), &t(g.clone(), 8, 8), LossSwitches::ALL).unwrap().values().unwrap();
        let (b, d, i) = oracle(&z, &g);
        assert!((v.bce - b).abs() < 1e-9 && (v.dice - d).abs() < 1e-9 && (v.iou - i).abs() < 1e-9);
        assert!((v.total - (b + d + i)).abs() < 1e-9);
    }
}

#[test]
fn batch_terms_average_per_sample_overlap() {
    let mut r = common::rng(3);
    let z: Vec<f64> = (0..32).map(|_| rand::Rng::random_range(&mut r, -3.0..3.0)).collect();
    let g: Vec<f64> = common::random_mask(&mut r, 2, 16, 0.5).iter().map(|&v| f64::from(v)).collect();
    let batched = Tensor::from_vec(z.clone(), (2, 4, 4), &Device::Cpu).unwrap();
    let gt = Tensor::from_vec(g.clone(), (2, 4, 4), &Device::Cpu).unwrap();
    let v = segmentation_loss(&batched, &gt, LossSwitches::ALL).unwrap().values().unwrap();
    let a = oracle(&z[..16], &g[..16]);
    let b = oracle(&z[16..], &g[16..]);
    assert!((v.dice - (a.1 + b.1) / 2.0).abs() < 1e-9);
    assert!((v.bce - (a.0 + b.0) / 2.0).abs() < 1e-9);
}

#[test]
fn non_binary_ground_truth_and_empty_switches_are_rejected() {
    let z = t(vec![0.0; 4], 2, 2);
    assert!(matches!(
        segmentation_loss(&z, &t(vec![0.0, 0.5, 1.0, 0.0], 2, 2), LossSwitches::ALL),
        Err(clipsam::Error::Input(_))
    ));
    let none = LossSwitches { bce: false, dice: false, iou: false };
    assert!(matches!(segmentation_loss(&z, &t(vec![0.0; 4], 2, 2), none), Err(clipsam::Error::Config { .. })));
}

#[test]
fn switches_select_terms_of_total() {
    let mut r = common::rng(4);
    let z: Vec<f64> = (0..36).map(|_| rand::Rng::random_range(&mut r, -3.0..3.0)).collect();
    let g: Vec<f64> = common::random_mask(&mut r, 6, 6, 0.5).iter().map(|&v| f64::from(v)).collect();
    let all = segmentation_loss(&t(z.clone(), 6, 6), &t(g.clone(), 6, 6), LossSwitches::ALL).unwrap().values().unwrap();
    let sw = LossSwitches { bce: true, dice: false, iou: true };
    let some = segmentation_loss(&t(z, 6, 6), &t(g, 6, 6), sw).unwrap().values().unwrap();
    assert!((some.total - (all.bce + all.iou)).abs() < 1e-12);
}

proptest! {
    #[test]
    fn every_term_is_nonnegative(
        z in proptest::collection::vec(-50.0f64..50.0, 16),
        g in proptest::collection::vec(0u8..2, 16),
    ) {
        let g: Vec<f64> = g.into_iter().map(f64::from).collect();
        let v = segmentation_loss(&t(z, 4, 4), &t(g, 4, 4), LossSwitches::ALL).unwrap().values().unwrap();
        prop_assert!(v.bce >= 0.0 && v.dice >= 0.0 && v.iou >= 0.0);
        prop_assert!(v.total.is_finite());
    }
}
