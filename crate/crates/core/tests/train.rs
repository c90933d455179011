mod common;

use std::collections::HashMap;

use common::oracles::assign_naive;
use common::{loss_grad_check, outputs, rng, toy_maps, GRAD_CHECK_SEEDS};
use midstate::data::{generate_dataset, load_split, Sample, SceneSpec, Split};
use midstate::post::BBox;
use midstate::tensor::{Shape, Tape, Tensor};
use midstate::train::{
    assign, cell_centers, detection_loss, fit, grids_for, loss_and_grads, Grid, LossWeights, Sgd,
    Target, TrainConfig, TrainError, Trainer, TOP_K,
};
use midstate::zoo::{Model, ModelConfig, Variant};
use proptest::prelude::*;
use rand::Rng;

fn target(class_id: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> Target {
    Target {
        class_id,
        bbox: BBox::new(x1, y1, x2, y2),
    }
}

#[test]
fn one_target_over_four_centers() {
    let grids = grids_for(64);
    let owners = assign(&[target(0, 27.0, 27.0, 37.0, 37.0)], &grids);
    let pos: Vec<usize> = owners
        .iter()
        .enumerate()
        .filter(|(_, o)| o.is_some())
        .map(|(i, _)| i)
        .collect();
    // Stride-8 cells (3,3), (3,4), (4,3), (4,4) of an 8x8 grid.
    assert_eq!(pos, vec![27, 28, 35, 36]);
}

#[test]
fn smaller_target_wins_shared_cell() {
    let grids = grids_for(64);
    let big = target(0, 0.0, 0.0, 64.0, 64.0);
    let small = target(1, 26.0, 26.0, 38.0, 38.0);
    for ts in [vec![big, small], vec![small, big]] {
        let owners = assign(&ts, &grids);
        let small_idx = ts.iter().position(|t| t.class_id == 1).unwrap();
        assert_eq!(owners[27], Some(small_idx));
        // The small box's four cells are among the big box's nine nearest
        // at stride 8; strides 16 and 32 add nine and four more.
        assert_eq!(
            owners.iter().filter(|o| o.is_some()).count(),
            TOP_K + TOP_K + 4
        );
    }
}

#[test]
fn tiny_target_takes_nearest_cell() {
    let owners = assign(&[target(0, 9.0, 9.0, 10.0, 10.0)], &grids_for(64));
    let pos: Vec<usize> = owners
        .iter()
        .enumerate()
        .filter(|(_, o)| o.is_some())
        .map(|(i, _)| i)
        .collect();
    // Stride-16 center (8, 8) is nearer than any stride-8 center.
    assert_eq!(pos, vec![64]);
}

#[test]
fn assignment_matches_exhaustive_oracle() {
    for seed in 0..150 {
        let mut r = rng(seed);
        let size = [64, 96, 160][seed as usize % 3];
        let grids = grids_for(size);
        let targets: Vec<Target> = (0..5)
            .map(|_| {
                let (w, h) = (r.random_range(2.0..60.0), r.random_range(2.0..60.0));
                let (x, y) = (
                    r.random_range(0.0..size as f64 - w),
                    r.random_range(0.0..size as f64 - h),
                );
                target(r.random_range(0..3), x, y, x + w, y + h)
            })
            .collect();
        let boxes: Vec<[f64; 4]> = targets
            .iter()
            .map(|t| [t.bbox.x1, t.bbox.y1, t.bbox.x2, t.bbox.y2])
            .collect();
        let level: Vec<usize> = grids
            .iter()
            .enumerate()
            .flat_map(|(i, g)| std::iter::repeat_n(i, g.cells()))
            .collect();
        assert_eq!(
            assign(&targets, &grids),
            assign_naive(&boxes, &cell_centers(&grids), &level, TOP_K),
            "seed {seed}"
        );
    }
}

/// Head maps for a 32 px input with `reg_max` bins.
#[test]
fn loss_gradient_matches_finite_differences() {
    for seed in 0..GRAD_CHECK_SEEDS {
        let report = loss_grad_check(seed);
        assert!(report.pass, "seed {seed}: {report:?}");
    }
}

fn binary_entropy(w: f64) -> f64 {
    if w <= 0.0 || w >= 1.0 {
        0.0
    } else {
        -(w * w.ln() + (1.0 - w) * (1.0 - w).ln())
    }
}

#[test]
fn perfect_predictions_reach_the_floor() {
    let reg_max = 16;
    let grids = grids_for(64);
    let targets = vec![
        target(1, 20.5, 12.25, 47.0, 41.5),
        target(0, 2.0, 40.0, 14.0, 60.0),
    ];
    let owners = assign(&targets, &grids);
    let mut maps: Vec<Tensor<f64>> = Vec::new();
    let mut floor = 0.0;
    let mut cell_base = 0;
    for g in &grids {
        let mut cls = Tensor::full(Shape::new(1, 2, g.h, g.w), -16.0);
        let mut dist = Tensor::full(Shape::new(1, 4 * reg_max, g.h, g.w), -40.0);
        for cell in 0..g.cells() {
            let Some(ti) = owners[cell_base + cell] else {
                continue;
            };
            let t = &targets[ti];
            let (i, j) = (cell / g.w, cell % g.w);
            cls.set(0, t.class_id, i, j, 16.0);
            let s = g.stride as f64;
            let (ax, ay) = g.center(cell);
            let sides = [
                (ax - t.bbox.x1) / s,
                (ay - t.bbox.y1) / s,
                (t.bbox.x2 - ax) / s,
                (t.bbox.y2 - ay) / s,
            ];
            for (side, &d) in sides.iter().enumerate() {
                let lo = d.floor() as usize;
                let wr = d - lo as f64;
                dist.set(0, side * reg_max + lo, i, j, (1.0 - wr).max(1e-300).ln());
                dist.set(0, side * reg_max + lo + 1, i, j, wr.max(1e-300).ln());
                floor += binary_entropy(wr) / 4.0;
            }
        }
        maps.push(cls);
        maps.push(dist);
        cell_base += g.cells();
    }
    let num_pos = owners.iter().filter(|o| o.is_some()).count() as f64;
    let mut tape = Tape::new();
    let vars: Vec<_> = maps.into_iter().map(|m| tape.param(m)).collect();
    let (_, parts) = detection_loss(
        &mut tape,
        &outputs(&vars),
        &[targets],
        &LossWeights::default(),
    )
    .unwrap();
    assert!(parts.box_ < 1e-3, "{parts:?}");
    assert!(parts.cls < 1e-2, "{parts:?}");
    assert!(
        (parts.dfl - floor / num_pos).abs() < 1e-6,
        "{parts:?} floor {}",
        floor / num_pos
    );
}

#[test]
fn no_positives_leaves_classification_only() {
    let mut r = rng(2);
    let mut tape = Tape::new();
    let vars: Vec<_> = toy_maps(&mut r, 2, 3, 4)
        .into_iter()
        .map(|m| tape.param(m))
        .collect();
    let w = LossWeights::default();
    let (_, parts) = detection_loss(&mut tape, &outputs(&vars), &[vec![], vec![]], &w).unwrap();
    assert_eq!((parts.box_, parts.dfl), (0.0, 0.0));
    assert_eq!(parts.total, w.cls * parts.cls);
    assert!(parts.cls > 0.0);
}

#[test]
fn non_finite_loss_names_the_term() {
    let mut r = rng(3);
    let mut maps = toy_maps(&mut r, 1, 2, 4);
    maps[0].data_mut()[0] = f64::NAN;
    let mut tape = Tape::new();
    let vars: Vec<_> = maps.into_iter().map(|m| tape.constant(m)).collect();
    let err = detection_loss(
        &mut tape,
        &outputs(&vars),
        &[vec![]],
        &LossWeights::default(),
    )
    .unwrap_err();
    assert!(
        matches!(err, TrainError::NonFinite { term: "cls", .. }),
        "{err}"
    );
    assert!(err.to_string().contains("cls"));
}

#[test]
fn loss_rejects_wrong_batch() {
    let mut r = rng(4);
    let mut tape = Tape::new();
    let vars: Vec<_> = toy_maps(&mut r, 2, 2, 4)
        .into_iter()
        .map(|m| tape.param(m))
        .collect();
    assert!(matches!(
        detection_loss(
            &mut tape,
            &outputs(&vars),
            &[vec![]],
            &LossWeights::default()
        ),
        Err(TrainError::Shape(_))
    ));
}

fn bowl_store(p: &[f64]) -> midstate::nn::ParamStore<f64> {
    let mut s = midstate::nn::ParamStore::new();
    s.insert(
        "p",
        Tensor::from_f64(Shape::new(1, p.len(), 1, 1), p).unwrap(),
        true,
    );
    s
}

#[test]
fn sgd_fixtures() {
    let g = Tensor::from_f64(Shape::new(1, 3, 1, 1), &[0.5, -1.0, 2.0]).unwrap();
    let grads = HashMap::from([("p".to_string(), g.clone())]);

    let mut store = bowl_store(&[1.0, 2.0, 3.0]);
    let mut sgd = Sgd::new(0.1, 0.0, 0.0, &store);
    sgd.step(&mut store, &grads).unwrap();
    assert_eq!(
        store.get("p").unwrap().tensor.data(),
        &[1.0 - 0.1 * 0.5, 2.0 + 0.1, 3.0 - 0.1 * 2.0]
    );

    // Coasting on velocity alone.
    let mut store = bowl_store(&[1.0, 2.0, 3.0]);
    let mut sgd = Sgd::new(0.1, 0.9, 0.0, &store);
    sgd.velocity
        .get_mut("p")
        .unwrap()
        .data_mut()
        .copy_from_slice(&[1.0, 1.0, -2.0]);
    sgd.step(&mut store, &HashMap::new()).unwrap();
    let want = [1.0 - 0.1 * 0.9, 2.0 - 0.1 * 0.9, 3.0 + 0.1 * 0.9 * 2.0];
    for (a, b) in store.get("p").unwrap().tensor.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }

    // Coupled decay enters the velocity.
    let mut store = bowl_store(&[2.0]);
    let mut sgd = Sgd::new(0.5, 0.0, 0.1, &store);
    sgd.step(&mut store, &HashMap::new()).unwrap();
    assert_eq!(
        store.get("p").unwrap().tensor.data(),
        &[2.0 - 0.5 * 0.1 * 2.0]
    );
}

/// f(p) = |p|^2 at lr 0.01. Heavy-ball contraction is sqrt(momentum) per
/// step, so 200 steps reach 1e-6 only for momentum near the optimum
/// (1 - sqrt(2 lr))^2; 0.8 is used here.
#[test]
fn sgd_minimizes_a_quadratic_bowl() {
    let p0 = [0.6, -0.8, 0.0, 0.3];
    let mut store = bowl_store(&p0);
    let mut sgd = Sgd::new(0.01, 0.8, 0.0, &store);
    let (mut q, mut v) = (p0.to_vec(), vec![0.0; 4]);
    for _ in 0..200 {
        let g = store.get("p").unwrap().tensor.map(|x| 2.0 * x);
        sgd.step(&mut store, &HashMap::from([("p".to_string(), g)]))
            .unwrap();
        for i in 0..4 {
            v[i] = 0.8 * v[i] + 2.0 * q[i];
            q[i] -= 0.01 * v[i];
        }
    }
    let p = store.get("p").unwrap().tensor.data().to_vec();
    assert_eq!(p, q);
    assert!(p.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-6);
}

fn desk_data(n: usize, classes: usize, seed: u64) -> (tempfile::TempDir, Vec<Sample>) {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(dir.path(), n, classes, &SceneSpec::new(64), seed).unwrap();
    let s = load_split(dir.path(), &m, Split::Train).unwrap();
    (dir, s)
}

fn small_model(variant: Variant, nc: usize) -> Model<f32> {
    let cfg = ModelConfig {
        input_size: 64,
        ..ModelConfig::desk(variant, nc)
    };
    Model::build(&cfg, &mut rng(0)).unwrap()
}

fn tiny_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        image_size: 64,
        batch_size: 3,
        epochs,
        eval_every: 2,
        ..TrainConfig::desk()
    }
}

#[test]
fn every_block_receives_gradient() {
    let (_d, samples) = desk_data(10, 3, 1);
    let batch: Vec<&Sample> = samples.iter().take(4).collect();
    for v in [Variant::MidstateEd, Variant::Yolov10nLike] {
        let model = small_model(v, 3);
        let (_, grads, _) = loss_and_grads(&model, &batch, &LossWeights::default()).unwrap();
        for layer in &model.layers {
            let prefix = format!("{}.", layer.name);
            let keys: Vec<&str> = model
                .store
                .iter()
                .filter(|(k, p)| p.trainable && k.starts_with(&prefix))
                .map(|(k, _)| k)
                .collect();
            if keys.is_empty() {
                continue;
            }
            let norm: f64 = keys
                .iter()
                .map(|k| {
                    grads[*k]
                        .data()
                        .iter()
                        .map(|g| (*g as f64).powi(2))
                        .sum::<f64>()
                })
                .sum();
            assert!(norm > 0.0, "{} {}", v.name(), layer.name);
            for k in keys {
                assert!(grads.contains_key(k), "{k}");
            }
        }
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (_d, samples) = desk_data(10, 2, 2);
    let mut model = small_model(Variant::MidstateEd, 2);
    let before = model.store.clone();
    let mut t = Trainer::new(
        TrainConfig {
            lr: 0.0,
            ..tiny_cfg(1)
        },
        &model,
    )
    .unwrap();
    t.run_epoch(&mut model, &samples).unwrap();
    for ((k, a), (_, b)) in before.iter().zip(model.store.iter()) {
        if a.trainable {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor), "{k}");
        }
    }
}

#[test]
fn training_is_reproducible_and_resumable() {
    let (_d, samples) = desk_data(10, 2, 3);
    let run = |epochs: usize, out: Option<&std::path::Path>| {
        let mut model = small_model(Variant::MidstateEd, 2);
        let mut t = Trainer::new(tiny_cfg(epochs), &model).unwrap();
        let logs = fit(&mut model, &mut t, &samples, &samples, out, |_| {}).unwrap();
        (model, logs)
    };
    let (a, la) = run(4, None);
    let (b, lb) = run(4, None);
    assert_eq!(la, lb);
    assert_eq!(
        midstate::zoo::encode(&a).unwrap(),
        midstate::zoo::encode(&b).unwrap()
    );
    assert!(la.iter().all(|l| l.loss.total.is_finite()));
    assert!(la[1].metrics.is_some() && la[0].metrics.is_none());

    // Stop after two epochs, resume from disk, finish: same result.
    let dir = tempfile::tempdir().unwrap();
    let (_, first) = run(2, Some(dir.path()));
    let (mut m, mut t) = Trainer::resume(dir.path()).unwrap();
    assert_eq!(t.epochs_done, 2);
    t.cfg.epochs = 4;
    let rest = fit(&mut m, &mut t, &samples, &samples, Some(dir.path()), |_| {}).unwrap();
    let joined: Vec<_> = first.into_iter().chain(rest).collect();
    assert_eq!(joined, la);
    assert_eq!(
        midstate::zoo::encode(&m).unwrap(),
        midstate::zoo::encode(&a).unwrap()
    );
    let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(log.starts_with("epoch,loss_total,loss_cls,loss_box,loss_dfl,P,R,mAP50,mAP5095\n"));
}

#[test]
fn loss_falls_over_early_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(dir.path(), 10, 3, &SceneSpec::new(160), 11).unwrap();
    let mut train = load_split(dir.path(), &m, Split::Train).unwrap();
    train.truncate(8);
    let mut model =
        Model::<f32>::build(&ModelConfig::desk(Variant::MidstateEd, 3), &mut rng(0)).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        eval_every: 0,
        ..TrainConfig::desk()
    };
    let mut t = Trainer::new(cfg, &model).unwrap();
    let logs = fit(&mut model, &mut t, &train, &[], None, |_| {}).unwrap();
    let losses: Vec<f64> = logs.iter().map(|l| l.loss.total).collect();
    let smooth: Vec<f64> = losses
        .windows(3)
        .map(|w| w.iter().sum::<f64>() / 3.0)
        .collect();
    for w in smooth.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn train_config_text() {
    let c = TrainConfig {
        target_map50: Some(0.95),
        seed: 9,
        ..TrainConfig::desk()
    };
    assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
    assert_eq!(
        TrainConfig::from_text("# defaults\n").unwrap(),
        TrainConfig::desk()
    );
    assert!(TrainConfig::from_text("image_size=100").is_err());
    assert!(TrainConfig::from_text("momentum=1.5").is_err());
    assert!(TrainConfig::from_text("bogus=1").is_err());
    let full = TrainConfig::full();
    assert_eq!(
        (
            full.lr,
            full.momentum,
            full.weight_decay,
            full.batch_size,
            full.image_size
        ),
        (0.01, 0.937, 0.0005, 32, 640)
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn each_target_claims_at_most_top_k_per_scale(seed in 0u64..100_000) {
        let mut r = rng(seed);
        let grids: [Grid; 3] = grids_for(96);
        let targets: Vec<Target> = (0..r.random_range(0..7))
            .map(|_| {
                let (w, h) = (r.random_range(1.0..90.0), r.random_range(1.0..90.0));
                let (x, y) = (r.random_range(0.0..96.0 - w), r.random_range(0.0..96.0 - h));
                target(0, x, y, x + w, y + h)
            })
            .collect();
        let owners = assign(&targets, &grids);
        let centers = cell_centers(&grids);
        for (ti, t) in targets.iter().enumerate() {
            let mine: Vec<usize> = (0..owners.len()).filter(|&c| owners[c] == Some(ti)).collect();
            let mut base = 0;
            for g in &grids {
                prop_assert!(mine.iter().filter(|&&c| c >= base && c < base + g.cells()).count() <= TOP_K);
                base += g.cells();
            }
            let contains_any = centers.iter().any(|&(x, y)| t.bbox.contains(x, y));
            for c in mine {
                prop_assert!(!contains_any || t.bbox.contains(centers[c].0, centers[c].1));
            }
        }
    }
}
