//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`); the desk-scale experiments
//! train ten toy models, so expect tens of minutes on one core.

use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::{Device, Tensor, Var};
use clipsam::backbone::is_adapter;
use clipsam::conditioning::Modalities;
use clipsam::data::{generate_samples, GeneratorConfig, Sample};
use clipsam::evaluation::{e_measure, evaluate, mae, miou_protocol, s_measure, weighted_fbeta, MetricsRecord};
use clipsam::model::TOY_CLASSES;
use clipsam::rng::{derive_seed, substream};
use clipsam::training::{
    build_trainable_set, check_gradient_gating, classify, parameter_report, run_batch, segmentation_loss, train,
    train_model, EpochRecord, LossSwitches, ParamGroup, PipelineItem, PromptConfig, TrainConfig,
};
use clipsam::{Architecture, ClipGuidedSam, ModelConfig, PromptMode};
use ndarray::{Array2, Array3};
use rand::Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Outcome = Result<String, String>;

const SEEDS: [u64; 3] = [0, 1, 2];
const EPOCHS: usize = 30;
const DATA_SEED: u64 = 7;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_image(seed: u64, size: usize) -> Array3<f32> {
    let mut rng = substream(seed, "image");
    Array3::from_shape_fn((size, size, 3), |_| rng.random::<f32>())
}

fn semi_item<'a>(image: &'a Array3<f32>, class: &'a str, seed: u64) -> PipelineItem<'a> {
    PipelineItem { image, class, gt: None, user_points: None, seed }
}

fn criterion_1() -> Outcome {
    let cfg = ModelConfig::toy();
    let arch = Architecture { plan: cfg.full_budget(), modalities: Modalities::FULL };
    let model = ClipGuidedSam::new(&cfg, &arch, 11).map_err(err)?;
    // make the adapters non-trivial, then close every gate
    model.store().perturb(|n| is_adapter(n) && !n.ends_with(".gate"), 0.5, 3).map_err(err)?;
    let gates = model.store().fill(|n| is_adapter(n) && n.ends_with(".gate"), 0.0).map_err(err)?;
    let bare = model.without_adapters().map_err(err)?;
    let prompt = PromptConfig::default();
    let mut max_diff = 0f32;
    for i in 0..20u64 {
        let img = random_image(100 + i, 96);
        let class = &cfg.classes[i as usize % cfg.classes.len()];
        let a = run_batch(&model, &[semi_item(&img, class, i)], PromptMode::SemiAutomatic, &prompt).map_err(err)?;
        let b = run_batch(&bare, &[semi_item(&img, class, i)], PromptMode::SemiAutomatic, &prompt).map_err(err)?;
        let a = a.logits.flatten_all().and_then(|t| t.to_vec1::<f32>()).map_err(err)?;
        let b = b.logits.flatten_all().and_then(|t| t.to_vec1::<f32>()).map_err(err)?;
        for (x, y) in a.iter().zip(&b) {
            if x.to_bits() != y.to_bits() {
                max_diff = max_diff.max((x - y).abs());
            }
        }
    }
    check(max_diff == 0.0, format!("{gates} gates closed, 20 images, max |diff| = {max_diff:e}"))
}

fn criterion_2() -> Outcome {
    let mut cfg = ModelConfig::toy();
    cfg.seg_encoder.depth = 12;
    cfg.vision_encoder.depth = 12;
    let samples = generate_samples(&GeneratorConfig::new(2, &TOY_CLASSES, 96, false, 5)).map_err(err)?;
    let items: Vec<PipelineItem> = samples
        .iter()
        .map(|s| {
            let (class, gt) = s.masks.iter().next().expect("sample has a class");
            PipelineItem { image: &s.image, class, gt: Some(gt.view()), user_points: None, seed: 1 }
        })
        .collect();
    let prompt = PromptConfig::default();
    let mut lines = Vec::new();
    let mut ok = true;
    for (s, label) in [(0usize, "S=0"), (12, "S=12")] {
        let arch = Architecture { plan: cfg.budget(12, s, true).map_err(err)?, modalities: Modalities::FULL };
        let model = ClipGuidedSam::new(&cfg, &arch, 21).map_err(err)?;
        // generic (non-initial) adapter weights, so the injected pathway carries signal
        model.store().perturb(|n| is_adapter(n) && n.contains(".up."), 0.05, 9).map_err(err)?;
        let r = check_gradient_gating(&model, &items, PromptMode::SemiAutomatic, &prompt).map_err(err)?;
        let blocks_nonzero = r.vision_blocks.iter().filter(|&&g| g > 0.0).count();
        if s == 0 {
            ok &= r.vision_total == 0.0;
        } else {
            ok &= r.vision_total > 0.0 && blocks_nonzero == 12;
        }
        ok &= r.text == 0.0;
        lines.push(format!(
            "{label}: vision |g| = {:.3e} ({blocks_nonzero}/12 attention blocks > 0), text |g| = {:.1e}",
            r.vision_total, r.text
        ));
    }
    check(ok, lines.join("; "))
}

fn criterion_3() -> Outcome {
    let cfg = ModelConfig::toy();
    let train_cfg = TrainConfig { epochs: 1, batch_size: 1, lr: 1e-3, ..TrainConfig::default() };
    let arch = train_cfg.architecture(&cfg).map_err(err)?;
    let model = ClipGuidedSam::new(&cfg, &arch, 31).map_err(err)?;
    let pool = generate_samples(&GeneratorConfig::new(20, &TOY_CLASSES, 96, false, 8)).map_err(err)?;
    let mut set: Vec<Sample> = Vec::new();
    let mut pairs = 0;
    for s in pool {
        if pairs + s.masks.len() <= 5 {
            pairs += s.masks.len();
            set.push(s);
        }
        if pairs == 5 {
            break;
        }
    }
    if pairs != 5 {
        return Err(format!("could not assemble 5 training pairs (got {pairs})"));
    }
    let before = model.store().snapshot().map_err(err)?;
    let trainable = build_trainable_set(model.store(), &train_cfg.freeze, &arch.plan).map_err(err)?;
    let out = train_model(model, &train_cfg, &set, &[], |_| {}).map_err(err)?;
    let after = out.model.store().snapshot().map_err(err)?;
    let names = trainable.names();
    let mut frozen_changed = Vec::new();
    let mut changed_by_group: BTreeMap<ParamGroup, usize> = BTreeMap::new();
    for (name, b) in &before {
        let a = &after[name];
        let changed = a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits());
        if names.contains(name) {
            let group = classify(name).map_err(err)?.0;
            *changed_by_group.entry(group).or_default() += usize::from(changed);
        } else if changed {
            frozen_changed.push(name.clone());
        }
    }
    let empty: Vec<_> = trainable.groups.keys().filter(|g| changed_by_group.get(g).copied().unwrap_or(0) == 0).collect();
    check(
        frozen_changed.is_empty() && empty.is_empty(),
        format!(
            "5 steps; {} frozen tensors, {} changed; changed per trainable group {:?}; groups without change {:?}",
            before.len() - names.len(),
            frozen_changed.len(),
            changed_by_group,
            empty
        ),
    )
}

fn criterion_4() -> Outcome {
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for case in 0..5u64 {
        let mut rng = substream(case, "loss-fd");
        let z: Vec<f64> = (0..36).map(|_| rng.random_range(-3.0..3.0)).collect();
        let g: Vec<f64> = (0..36).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();
        let gt = Tensor::from_vec(g, (6, 6), &Device::Cpu).map_err(err)?;
        for (term, sw) in [
            ("bce", LossSwitches { bce: true, dice: false, iou: false }),
            ("dice", LossSwitches { bce: false, dice: true, iou: false }),
            ("iou", LossSwitches { bce: false, dice: false, iou: true }),
        ] {
            let var = Var::from_tensor(&Tensor::from_vec(z.clone(), (6, 6), &Device::Cpu).map_err(err)?).map_err(err)?;
            let loss = segmentation_loss(var.as_tensor(), &gt, sw).map_err(err)?;
            let grads = loss.total.backward().map_err(err)?;
            let analytic = grads.get(var.as_tensor()).ok_or("no gradient")?.flatten_all().and_then(|t| t.to_vec1::<f64>()).map_err(err)?;
            let eval = |v: &[f64]| -> Result<f64, String> {
                let t = Tensor::from_vec(v.to_vec(), (6, 6), &Device::Cpu).map_err(err)?;
                segmentation_loss(&t, &gt, sw).and_then(|l| l.values()).map(|v| v.total).map_err(err)
            };
            let mut num = vec![0.0; 36];
            for i in 0..36 {
                let mut p = z.clone();
                let mut m = z.clone();
                p[i] += h;
                m[i] -= h;
                num[i] = (eval(&p)? - eval(&m)?) / (2.0 * h);
            }
            let diff: f64 = analytic.iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(num.iter().map(|n| n * n).sum::<f64>().sqrt());
            let rel = if scale == 0.0 { diff } else { diff / scale };
            if rel > 1e-3 {
                return Err(format!("case {case}, {term}: relative error {rel:e}"));
            }
            worst = worst.max(rel);
        }
    }
    check(true, format!("5 cases x 3 terms, worst relative error {worst:.2e}"))
}

mod oracle {
    pub fn miou(cases: &[(Vec<u8>, Vec<u8>, usize)], classes: usize) -> f64 {
        let mut inter = vec![0u64; classes];
        let mut union = vec![0u64; classes];
        for (p, g, c) in cases {
            for k in 0..p.len() {
                if p[k] == 1 && g[k] == 1 {
                    inter[*c] += 1;
                }
                if p[k] == 1 || g[k] == 1 {
                    union[*c] += 1;
                }
            }
        }
        let mut sum = 0.0;
        let mut n = 0.0;
        for c in 0..classes {
            if union[c] > 0 {
                sum += inter[c] as f64 / union[c] as f64;
                n += 1.0;
            }
        }
        if n == 0.0 {
            0.0
        } else {
            sum / n
        }
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn std1(v: &[f64]) -> f64 {
        if v.len() < 2 {
            return 0.0;
        }
        let m = mean(v);
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    }

    fn object(vals: &[f64]) -> f64 {
        if vals.is_empty() {
            return 0.0;
        }
        let x = mean(vals);
        2.0 * x / (x * x + 1.0 + std1(vals) + f64::EPSILON)
    }

    fn ssim(p: &[f64], g: &[f64]) -> f64 {
        if p.is_empty() {
            return 0.0;
        }
        let n = p.len() as f64;
        let x = mean(p);
        let y = mean(g);
        let d = if p.len() > 1 { n - 1.0 } else { 1.0 };
        let sx = p.iter().map(|a| (a - x).powi(2)).sum::<f64>() / d;
        let sy = g.iter().map(|a| (a - y).powi(2)).sum::<f64>() / d;
        let sxy = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / d;
        let alpha = 4.0 * x * y * sxy;
        let beta = (x * x + y * y) * (sx + sy);
        if alpha != 0.0 {
            alpha / (beta + f64::EPSILON)
        } else if beta == 0.0 {
            1.0
        } else {
            0.0
        }
    }

    /// `p`, `g` row-major `h x w`.
    pub fn s_measure(p: &[f64], g: &[u8], h: usize, w: usize) -> f64 {
        let gf: Vec<f64> = g.iter().map(|&v| f64::from(v)).collect();
        let y = mean(&gf);
        if y == 0.0 {
            return (1.0 - mean(p)).max(0.0);
        }
        if y == 1.0 {
            return mean(p).max(0.0);
        }
        let fg: Vec<f64> = (0..p.len()).filter(|&k| g[k] == 1).map(|k| p[k]).collect();
        let bg: Vec<f64> = (0..p.len()).filter(|&k| g[k] == 0).map(|k| 1.0 - p[k]).collect();
        let so = y * object(&fg) + (1.0 - y) * object(&bg);
        let (mut ry, mut rx, mut cnt) = (0.0, 0.0, 0.0);
        for k in 0..g.len() {
            if g[k] == 1 {
                ry += (k / w) as f64;
                rx += (k % w) as f64;
                cnt += 1.0;
            }
        }
        let cy = ((ry / cnt).round_ties_even() as usize + 1).min(h);
        let cx = ((rx / cnt).round_ties_even() as usize + 1).min(w);
        let area = (h * w) as f64;
        let region = |r0: usize, r1: usize, c0: usize, c1: usize| {
            let mut pp = Vec::new();
            let mut gg = Vec::new();
            for r in r0..r1 {
                for c in c0..c1 {
                    pp.push(p[r * w + c]);
                    gg.push(gf[r * w + c]);
                }
            }
            ssim(&pp, &gg)
        };
        let w1 = (cx * cy) as f64 / area;
        let w2 = (cy * (w - cx)) as f64 / area;
        let w3 = ((h - cy) * cx) as f64 / area;
        let w4 = 1.0 - w1 - w2 - w3;
        let sr = w1 * region(0, cy, 0, cx) + w2 * region(0, cy, cx, w) + w3 * region(cy, h, 0, cx) + w4 * region(cy, h, cx, w);
        (0.5 * so + 0.5 * sr).max(0.0).min(1.0)
    }

    pub fn e_measure(p: &[f64], g: &[u8]) -> f64 {
        let n = p.len() as f64;
        let fm: Vec<f64> = p.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
        let gt: Vec<f64> = g.iter().map(|&v| f64::from(v)).collect();
        let gsum: f64 = gt.iter().sum();
        let enhanced: Vec<f64> = if gsum == 0.0 {
            fm.iter().map(|f| 1.0 - f).collect()
        } else if gsum == n {
            fm.clone()
        } else {
            let mf = mean(&fm);
            let mg = mean(&gt);
            fm.iter()
                .zip(&gt)
                .map(|(f, g)| {
                    let (a, b) = (f - mf, g - mg);
                    let align = 2.0 * a * b / (a * a + b * b + f64::EPSILON);
                    (align + 1.0).powi(2) / 4.0
                })
                .collect()
        };
        (enhanced.iter().sum::<f64>() / n).clamp(0.0, 1.0)
    }

    pub fn weighted_f(p: &[f64], g: &[u8], h: usize, w: usize) -> f64 {
        let fg: Vec<usize> = (0..g.len()).filter(|&k| g[k] == 1).collect();
        if fg.is_empty() {
            return 0.0;
        }
        let e: Vec<f64> = (0..p.len()).map(|k| (p[k] - f64::from(g[k])).abs()).collect();
        let mut dist = vec![0.0; p.len()];
        let mut et = e.clone();
        for k in 0..p.len() {
            if g[k] == 1 {
                continue;
            }
            let (r, c) = ((k / w) as f64, (k % w) as f64);
            let mut best = usize::MAX;
            let mut bd = f64::INFINITY;
            for &f in &fg {
                let d = ((f / w) as f64 - r).hypot((f % w) as f64 - c);
                if d < bd {
                    bd = d;
                    best = f;
                }
            }
            dist[k] = bd;
            et[k] = e[best];
        }
        let mut kern = [0.0f64; 49];
        for (i, v) in kern.iter_mut().enumerate() {
            let (y, x) = ((i / 7) as f64 - 3.0, (i % 7) as f64 - 3.0);
            *v = (-(x * x + y * y) / 50.0).exp();
        }
        let ks: f64 = kern.iter().sum();
        kern.iter_mut().for_each(|v| *v /= ks);
        let mut ew_fg = 0.0;
        let mut ew_bg = 0.0;
        for k in 0..p.len() {
            let (r, c) = ((k / w) as isize, (k % w) as isize);
            let mut ea = 0.0;
            for i in 0..49 {
                let (rr, cc) = (r + (i / 7) as isize - 3, c + (i % 7) as isize - 3);
                if rr >= 0 && cc >= 0 && rr < h as isize && cc < w as isize {
                    ea += kern[i] * et[rr as usize * w + cc as usize];
                }
            }
            if g[k] == 1 {
                ew_fg += e[k].min(ea);
            } else {
                ew_bg += e[k] * (2.0 - (0.5f64.ln() / 5.0 * dist[k]).exp());
            }
        }
        let n_fg = fg.len() as f64;
        let tp = n_fg - ew_fg;
        let recall = 1.0 - ew_fg / n_fg;
        let precision = tp / (f64::EPSILON + tp + ew_bg);
        (2.0 * recall * precision / (f64::EPSILON + recall + precision)).clamp(0.0, 1.0)
    }
}

fn random_gt(rng: &mut impl Rng, h: usize, w: usize) -> Vec<u8> {
    // a random rectangle plus noise keeps both classes present most of the time
    let (r0, c0) = (rng.random_range(0..h / 2), rng.random_range(0..w / 2));
    let (r1, c1) = (rng.random_range(r0 + 1..=h), rng.random_range(c0 + 1..=w));
    (0..h * w)
        .map(|k| {
            let (r, c) = (k / w, k % w);
            let inside = r >= r0 && r < r1 && c >= c0 && c < c1;
            u8::from(inside ^ rng.random_bool(0.1))
        })
        .collect()
}

fn criterion_5() -> Outcome {
    let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let mut worst_miou: f64 = 0.0;
    let mut worst_mae: f64 = 0.0;
    for case in 0..100u64 {
        let mut rng = substream(case, "miou-case");
        let n_images = rng.random_range(1..=4);
        let mut preds = BTreeMap::new();
        let mut gts = BTreeMap::new();
        let mut flat = Vec::new();
        for i in 0..n_images {
            for (ci, c) in classes.iter().enumerate() {
                if !rng.random_bool(0.7) {
                    continue;
                }
                let g: Vec<u8> = (0..64).map(|_| u8::from(rng.random_bool(0.3))).collect();
                let p: Vec<u8> = (0..64).map(|_| u8::from(rng.random_bool(0.4))).collect();
                gts.insert((format!("{i}"), c.clone()), Array2::from_shape_vec((8, 8), g.clone()).unwrap());
                preds.insert((format!("{i}"), c.clone()), Array2::from_shape_vec((8, 8), p.clone()).unwrap());
                flat.push((p, g, ci));
            }
        }
        let got = miou_protocol(&preds, &gts, &classes).map_err(err)?.miou;
        worst_miou = worst_miou.max((got - oracle::miou(&flat, classes.len())).abs());

        let prob: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let g: Vec<u8> = (0..64).map(|_| u8::from(rng.random_bool(0.5))).collect();
        let mut want = 0.0;
        for k in 0..64 {
            want += (prob[k] - f64::from(g[k])).abs();
        }
        want /= 64.0;
        let got = mae(Array2::from_shape_vec((8, 8), prob).unwrap().view(), Array2::from_shape_vec((8, 8), g).unwrap().view())
            .map_err(err)?;
        worst_mae = worst_mae.max((got - want).abs());
    }

    let mut perfect = Vec::new();
    for case in 0..5u64 {
        let mut rng = substream(case, "perfect");
        let g = Array2::from_shape_vec((16, 16), random_gt(&mut rng, 16, 16)).unwrap();
        let p = g.mapv(f64::from);
        perfect.push(s_measure(p.view(), g.view()).map_err(err)?);
        perfect.push(e_measure(p.view(), g.view()).map_err(err)?);
        perfect.push(weighted_fbeta(p.view(), g.view()).map_err(err)?);
    }
    let perfect_ok = perfect.iter().all(|&v| (v - 1.0).abs() < 1e-12);

    let mut worst_struct: f64 = 0.0;
    for case in 0..20u64 {
        let mut rng = substream(case, "structure-case");
        let g = random_gt(&mut rng, 16, 16);
        let p: Vec<f64> = (0..256).map(|_| rng.random::<f64>()).collect();
        let ga = Array2::from_shape_vec((16, 16), g.clone()).unwrap();
        let pa = Array2::from_shape_vec((16, 16), p.clone()).unwrap();
        let pairs = [
            (s_measure(pa.view(), ga.view()).map_err(err)?, oracle::s_measure(&p, &g, 16, 16)),
            (e_measure(pa.view(), ga.view()).map_err(err)?, oracle::e_measure(&p, &g)),
            (weighted_fbeta(pa.view(), ga.view()).map_err(err)?, oracle::weighted_f(&p, &g, 16, 16)),
        ];
        for (a, b) in pairs {
            worst_struct = worst_struct.max((a - b).abs());
        }
    }
    check(
        worst_miou <= 1e-9 && worst_mae <= 1e-9 && perfect_ok && worst_struct <= 1e-6,
        format!(
            "mIoU/MAE max err {worst_miou:.1e}/{worst_mae:.1e} (100 cases); perfect S/E/F all 1.0: {perfect_ok}; \
             S/E/F vs direct formulas max err {worst_struct:.1e} (20 cases)"
        ),
    )
}

fn criterion_6() -> Outcome {
    let report = parameter_report(&ModelConfig::vit_b(), &TrainConfig::default()).map_err(err)?;
    let base = report.sam_base() as f64 / 1e6;
    let vl = report.entry("clip.visual").ok_or("no vision entry")?.total_count as f64 / 1e6;
    let enc = report.entry("sam.image_encoder").ok_or("no encoder entry")?.total_count;
    let backbone = (enc - report.adapter_count) as f64;
    let formula = 100.0 * report.adapter_count as f64 / backbone;
    let within = |x: f64, target: f64| (x - target).abs() <= 0.02 * target;
    check(
        within(base, 93.7) && within(vl, 86.8) && (formula - report.adapter_overhead_pct).abs() < 1e-9,
        format!(
            "base segmentation {base:.2}M (93.7M +-2%), vision-language encoder {vl:.2}M (86.8M +-2%), \
             adapters {:.2}M = {:.2}% of the {:.2}M backbone",
            report.adapter_count as f64 / 1e6,
            report.adapter_overhead_pct,
            backbone / 1e6
        ),
    )
}

struct Run {
    log: Vec<EpochRecord>,
    semi: MetricsRecord,
    seconds: f64,
}

struct Data {
    train: Vec<Sample>,
    val: Vec<Sample>,
}

fn data() -> Result<Data, String> {
    let train = generate_samples(&GeneratorConfig::new(200, &TOY_CLASSES, 96, false, DATA_SEED)).map_err(err)?;
    let val = generate_samples(&GeneratorConfig::new(50, &TOY_CLASSES, 96, false, derive_seed(DATA_SEED, "val")))
        .map_err(err)?;
    Ok(Data { train, val })
}

fn run(data: &Data, seed: u64, mode: PromptMode, modalities: Modalities) -> Result<Run, String> {
    let cfg = TrainConfig { epochs: EPOCHS, seed, mode, modalities, ..experiment_config() };
    let start = Instant::now();
    let out = train(&ModelConfig::toy(), &cfg, &data.train, &data.val, |_| {}).map_err(err)?;
    let semi = evaluate(&out.model, &data.val, PromptMode::SemiAutomatic, &cfg.eval_config()).map_err(err)?.record;
    let seconds = start.elapsed().as_secs_f64();
    eprintln!(
        "  run seed={seed} mode={mode} modalities={modalities:?}: semi mIoU {:.2} in {seconds:.0}s",
        100.0 * semi.miou
    );
    Ok(Run { log: out.log, semi, seconds })
}

fn experiment_config() -> TrainConfig {
    TrainConfig { lr: 3e-3, batch_size: 8, ..TrainConfig::default() }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

struct Experiments {
    full: Vec<Run>,
    parallel: Vec<Run>,
    manual: Vec<Run>,
    repeat: Run,
}

fn experiments() -> Result<Experiments, String> {
    let data = data()?;
    let mut full = Vec::new();
    let mut parallel = Vec::new();
    let mut manual = Vec::new();
    for &seed in &SEEDS {
        full.push(run(&data, seed, PromptMode::SemiAutomatic, Modalities::FULL)?);
        parallel.push(run(&data, seed, PromptMode::SemiAutomatic, Modalities::NONE)?);
        manual.push(run(&data, seed, PromptMode::Manual, Modalities::FULL)?);
    }
    let repeat = run(&data, SEEDS[0], PromptMode::SemiAutomatic, Modalities::FULL)?;
    Ok(Experiments { full, parallel, manual, repeat })
}

fn miou_points(runs: &[Run]) -> Vec<f64> {
    runs.iter().map(|r| 100.0 * r.semi.miou).collect()
}

fn criterion_7(e: &Experiments) -> Outcome {
    let full = miou_points(&e.full);
    let par = miou_points(&e.parallel);
    let gaps: Vec<f64> = full.iter().zip(&par).map(|(a, b)| a - b).collect();
    let gap = median(gaps.clone());
    let slowest = e.full.iter().chain(&e.parallel).map(|r| r.seconds).fold(0.0, f64::max);
    check(
        gap >= 5.0 && slowest <= 1200.0,
        format!(
            "full fusion mIoU {full:.1?} vs parallel only {par:.1?}; median gain {gap:.1} points (>= 5); \
             {EPOCHS} epochs, slowest run {slowest:.0}s"
        ),
    )
}

fn criterion_8(e: &Experiments) -> Outcome {
    let aligned = miou_points(&e.full);
    let manual = miou_points(&e.manual);
    let drops: Vec<f64> = aligned.iter().zip(&manual).map(|(a, m)| a - m).collect();
    let drop = median(drops);
    check(
        drop >= 3.0,
        format!("semi-automatic trained {aligned:.1?} vs GT-point trained {manual:.1?} on CLIP prompts; median drop {drop:.1} points (>= 3)"),
    )
}

fn criterion_9(e: &Experiments) -> Outcome {
    let a = &e.full[0];
    let b = &e.repeat;
    let max_loss_diff = a
        .log
        .iter()
        .zip(&b.log)
        .map(|(x, y)| (x.loss.total - y.loss.total).abs().max((x.loss.bce - y.loss.bce).abs()))
        .fold(0.0, f64::max);
    let same_len = a.log.len() == b.log.len();
    let same_metrics = a.semi == b.semi;
    check(
        same_len && max_loss_diff <= 1e-6 && same_metrics,
        format!("{} epochs, max per-epoch loss difference {max_loss_diff:e}, identical final metrics: {same_metrics}", a.log.len()),
    )
}

fn report(n: usize, title: &str, outcome: Outcome) -> bool {
    match outcome {
        Ok(d) => {
            println!("PASS criterion {n}: {title} ({d})");
            true
        }
        Err(d) => {
            println!("FAIL criterion {n}: {title} ({d})");
            false
        }
    }
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String> + std::panic::UnwindSafe) -> Result<T, String> {
    std::panic::catch_unwind(f).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
    })
}

fn main() {
    let mut all = true;
    all &= report(1, "identity at init", guarded(criterion_1));
    all &= report(2, "gradient gating", guarded(criterion_2));
    all &= report(3, "freezing policy", guarded(criterion_3));
    all &= report(4, "loss gradients vs finite differences", guarded(criterion_4));
    all &= report(5, "metric oracles", guarded(criterion_5));
    all &= report(6, "parameter accounting", guarded(criterion_6));
    let experimental: [(usize, &str, fn(&Experiments) -> Outcome); 3] = [
        (7, "semantic-injection gain", criterion_7),
        (8, "prompt-alignment effect", criterion_8),
        (9, "determinism", criterion_9),
    ];
    match guarded(experiments) {
        Ok(e) => {
            for (n, title, f) in experimental {
                all &= report(n, title, f(&e));
            }
        }
        Err(msg) => {
            for (n, title, _) in experimental {
                all &= report(n, title, Err(format!("training failed: {msg}")));
            }
        }
    }
    if !all {
        std::process::exit(1);
    }
}
