#![allow(dead_code)]

pub mod oracles;

use oracles::{ap_naive, match_naive};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

use std::collections::HashMap;

use midstate::metrics::{result_order, GroundTruth, ScoredBox, IOU_SWEEP};
use midstate::nn::{BlockSpec, Forward, Mode, ParamStore, ScaleOutput};
use midstate::post::{BBox, Detection};
use midstate::tensor::{grad_check, GradCheckReport, Shape, Tape, Tensor, TensorError, Var};
use midstate::train::{detection_loss, LossWeights, Target, TrainError};
use rand::Rng;

pub const GRAD_CHECK_SEEDS: u64 = 20;

/// Sum of `y` weighted by fixed pseudo-random coefficients.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut r = rng(seed ^ 0x5eed);
    let weights = Tensor::<f64>::randn(tape.value(y).shape(), 1.0, &mut r);
    let wv = tape.constant(weights);
    let prod = tape.mul(y, wv).unwrap();
    tape.sum(prod).unwrap()
}

/// Randomizes every trainable tensor so that norm affines and biases are
/// not at their trivial initial values.
pub fn perturb(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed ^ 0xabc);
    for (key, p) in store.iter_mut() {
        if !p.trainable {
            continue;
        }
        let s = p.tensor.shape();
        let noise = Tensor::<f64>::randn(s, 0.5, &mut r);
        for (v, z) in p.tensor.data_mut().iter_mut().zip(noise.data()) {
            *v = if key.ends_with(".scale") {
                1.0 + z * 0.5
            } else {
                *v + z
            };
        }
    }
}

/// Finite-difference check of a block over its input(s) and every
/// trainable parameter, in training mode.
pub fn block_grad_check(
    spec: &BlockSpec,
    inputs: &[Shape],
    seed: u64,
    tol: f64,
) -> GradCheckReport {
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    spec.init("block0", &mut store, &mut r).unwrap();
    perturb(&mut store, seed);
    let keys: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(k, _)| k.to_string())
        .collect();
    let mut params: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|&s| Tensor::randn(s, 1.0, &mut r))
        .collect();
    params.extend(keys.iter().map(|k| store.get(k).unwrap().tensor.clone()));
    let n_in = inputs.len();
    grad_check(&params, tol, |tape, vars| {
        let bindings: HashMap<String, Var> = keys
            .iter()
            .cloned()
            .zip(vars[n_in..].iter().copied())
            .collect();
        let mut f = Forward::with_bindings(tape, &store, Mode::Train, bindings);
        let y = if n_in == 1 {
            spec.forward(&mut f, "block0", vars[0]).unwrap()
        } else {
            let outs = spec.forward_head(&mut f, "block0", &vars[..n_in]).unwrap();
            let mut parts = Vec::new();
            for (i, o) in outs.iter().enumerate() {
                parts.push(weighted_sum(f.tape, o.cls, seed + 10 * i as u64));
                parts.push(weighted_sum(f.tape, o.box_dist, seed + 10 * i as u64 + 5));
            }
            let mut acc = parts[0];
            for &p in &parts[1..] {
                acc = f.tape.add(acc, p)?;
            }
            return Ok(acc);
        };
        Ok(weighted_sum(f.tape, y, seed))
    })
    .unwrap()
}

/// Small instances of every block, each with its input shapes.
pub fn grad_check_specs() -> Vec<(BlockSpec, Vec<Shape>)> {
    let one = |c, h| vec![Shape::new(2, c, h, h)];
    let head_inputs = vec![
        Shape::new(2, 4, 4, 4),
        Shape::new(2, 4, 2, 2),
        Shape::new(2, 4, 1, 1),
    ];
    let head = |lightweight_cls| BlockSpec::DetectHead {
        channels: [4, 4, 4],
        num_classes: 2,
        reg_max: 2,
        lightweight_cls,
    };
    vec![
        (
            BlockSpec::ConvBnSilu {
                c_in: 3,
                c_out: 4,
                kernel: 3,
                stride: 2,
            },
            one(3, 5),
        ),
        (
            BlockSpec::DualConv {
                c_in: 4,
                c_out: 4,
                groups: 2,
            },
            one(4, 4),
        ),
        (
            BlockSpec::Bottleneck {
                c_in: 4,
                c_out: 4,
                shortcut: true,
                dual_groups: None,
            },
            one(4, 4),
        ),
        (
            BlockSpec::Bottleneck {
                c_in: 4,
                c_out: 4,
                shortcut: true,
                dual_groups: Some(2),
            },
            one(4, 4),
        ),
        (
            BlockSpec::C2f {
                c_in: 4,
                c_out: 4,
                repeats: 1,
                shortcut: true,
                dual_groups: None,
            },
            one(4, 4),
        ),
        (
            BlockSpec::C2f {
                c_in: 4,
                c_out: 4,
                repeats: 1,
                shortcut: false,
                dual_groups: Some(2),
            },
            one(4, 4),
        ),
        (
            BlockSpec::Sppf {
                c_in: 4,
                c_out: 3,
                kernel: 3,
            },
            one(4, 4),
        ),
        (
            BlockSpec::Ema {
                channels: 4,
                groups: 2,
            },
            one(4, 4),
        ),
        (BlockSpec::Scdd { c_in: 3, c_out: 4 }, one(3, 4)),
        (head(false), head_inputs.clone()),
        (head(true), head_inputs),
    ]
}

/// Random head maps at grids 4, 2 and 1 (strides 8, 16, 32 of a 32-px image).
pub fn toy_maps<R: Rng>(r: &mut R, n: usize, nc: usize, reg_max: usize) -> Vec<Tensor<f64>> {
    [4usize, 2, 1]
        .iter()
        .flat_map(|&g| {
            [
                Tensor::randn(Shape::new(n, nc, g, g), 1.0, r),
                Tensor::randn(Shape::new(n, 4 * reg_max, g, g), 1.0, r),
            ]
        })
        .collect()
}

pub fn outputs(vars: &[Var]) -> Vec<ScaleOutput> {
    vars.chunks(2)
        .map(|c| ScaleOutput {
            cls: c[0],
            box_dist: c[1],
        })
        .collect()
}

fn toy_target(class_id: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> Target {
    Target {
        class_id,
        bbox: BBox::new(x1, y1, x2, y2),
    }
}

/// Finite-difference check of the full detection loss over random head
/// maps for a 32-px, 2-class toy with reg_max 4.
pub fn loss_grad_check(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let params = toy_maps(&mut r, 2, 2, 4);
    let targets = vec![
        vec![
            toy_target(0, 3.0, 2.5, 17.0, 13.0),
            toy_target(1, 14.0, 9.0, 30.0, 31.0),
        ],
        vec![toy_target(
            1,
            r.random_range(0.0..10.0),
            4.0,
            24.0,
            r.random_range(20.0..32.0),
        )],
    ];
    let weights = LossWeights::default();
    grad_check(&params, 1e-3, |tape, vars| {
        let (loss, _) =
            detection_loss(tape, &outputs(vars), &targets, &weights).map_err(|e| match e {
                TrainError::Tensor(t) => t,
                other => TensorError::Usage(other.to_string()),
            })?;
        Ok(loss)
    })
    .unwrap()
}

/// Random boxes in a 100-px frame with coarse scores.
pub fn random_dets<R: Rng>(r: &mut R, n: usize, classes: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let (x, y) = (r.random_range(0.0..100.0), r.random_range(0.0..100.0));
            let (w, h) = (r.random_range(2.0..30.0), r.random_range(2.0..30.0));
            // Coarse scores make ties common.
            let score = (r.random_range(0..20) as f64) / 20.0;
            Detection {
                bbox: BBox::new(x, y, x + w, y + h),
                class_id: r.random_range(0..classes),
                score,
            }
        })
        .collect()
}

fn scored(image: &str, class_id: usize, score: f64, b: [f64; 4]) -> ScoredBox {
    ScoredBox {
        image_id: image.into(),
        class_id,
        score,
        x1: b[0],
        y1: b[1],
        x2: b[2],
        y2: b[3],
    }
}

/// Scenes of a few images with ground truth and noisy, partly spurious
/// predictions.
pub fn random_scene<R: Rng>(
    r: &mut R,
    images: usize,
    classes: usize,
) -> (Vec<GroundTruth>, Vec<ScoredBox>) {
    let (mut gts, mut preds) = (Vec::new(), Vec::new());
    for i in 0..images {
        let id = format!("img{i}");
        for _ in 0..r.random_range(0..6) {
            let (x, y) = (r.random_range(0.0..80.0), r.random_range(0.0..80.0));
            let (w, h) = (r.random_range(5.0..30.0), r.random_range(5.0..30.0));
            let c = r.random_range(0..classes);
            gts.push(GroundTruth {
                image_id: id.clone(),
                bbox: BBox::new(x, y, x + w, y + h),
                class_id: c,
            });
            for _ in 0..r.random_range(0..3) {
                let mut j = |s: f64| r.random_range(-s..s);
                let b = [x + j(4.0), y + j(4.0), x + w + j(4.0), y + h + j(4.0)];
                let cls = if r.random_bool(0.85) {
                    c
                } else {
                    r.random_range(0..classes)
                };
                preds.push(scored(&id, cls, (r.random_range(0..40) as f64) / 40.0, b));
            }
        }
        for _ in 0..r.random_range(0..3) {
            let (x, y) = (r.random_range(0.0..80.0), r.random_range(0.0..80.0));
            preds.push(scored(
                &id,
                r.random_range(0..classes),
                r.random::<f64>(),
                [x, y, x + 10.0, y + 10.0],
            ));
        }
    }
    (gts, preds)
}

/// Scalar recomputation of the headline numbers from the oracles.
pub fn naive_map(gts: &[GroundTruth], preds: &[ScoredBox], nc: usize) -> (f64, f64) {
    let mut sorted = preds.to_vec();
    sorted.sort_by(result_order);
    let d: Vec<_> = sorted
        .iter()
        .map(|p| (p.image_id.clone(), p.class_id, [p.x1, p.y1, p.x2, p.y2]))
        .collect();
    let g: Vec<_> = gts
        .iter()
        .map(|g| {
            (
                g.image_id.clone(),
                g.class_id,
                [g.bbox.x1, g.bbox.y1, g.bbox.x2, g.bbox.y2],
            )
        })
        .collect();
    let mut per_t = Vec::new();
    for &t in &IOU_SWEEP {
        let flags = match_naive(&d, &g, t);
        let mut aps = Vec::new();
        for c in 0..nc {
            let n_gt = gts.iter().filter(|g| g.class_id == c).count();
            if n_gt == 0 {
                continue;
            }
            let f: Vec<bool> = d
                .iter()
                .zip(&flags)
                .filter(|(x, _)| x.1 == c)
                .map(|(_, &f)| f)
                .collect();
            aps.push(ap_naive(&f, n_gt));
        }
        per_t.push(aps.iter().sum::<f64>() / aps.len() as f64);
    }
    (per_t[0], per_t.iter().sum::<f64>() / per_t.len() as f64)
}
