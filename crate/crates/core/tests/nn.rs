mod common;

use common::oracles::{
    batch_norm_naive, block_diagonal_weight, conv2d_naive, max_pool_naive, silu,
};
use common::{block_grad_check, grad_check_specs, perturb, rng, GRAD_CHECK_SEEDS};
use midstate::nn::{
    update_running_stats, BlockError, BlockSpec, Forward, Mode, ParamStore, BN_EPS,
};
use midstate::tensor::{ops, ConvParams, PoolKind, PoolParams, Shape, Tape, Tensor};
use proptest::prelude::*;

fn build(spec: &BlockSpec, seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    spec.init("block0", &mut store, &mut rng(seed)).unwrap();
    store
}

fn run(spec: &BlockSpec, store: &ParamStore<f64>, x: &Tensor<f64>, mode: Mode) -> Tensor<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut f = Forward::new(&mut tape, store, mode);
    let y = spec.forward(&mut f, "block0", xv).unwrap();
    tape.value(y).clone()
}

fn naive_conv(
    x: &Tensor<f64>,
    w: &[f64],
    (cout, cig, k): (usize, usize, usize),
    pad: usize,
    stride: usize,
) -> Tensor<f64> {
    let s = x.shape();
    let groups = s.c / cig;
    let (out, (n, c, h, wd)) = conv2d_naive(
        x.data(),
        (s.n, s.c, s.h, s.w),
        w,
        (cout, k, k),
        None,
        stride,
        pad,
        groups,
    );
    Tensor::from_vec(Shape::new(n, c, h, wd), out).unwrap()
}

fn bn_silu_naive(x: &Tensor<f64>, store: &ParamStore<f64>, prefix: &str, act: bool) -> Tensor<f64> {
    let s = x.shape();
    let scale = store
        .get(&format!("{prefix}.scale"))
        .unwrap()
        .tensor
        .data()
        .to_vec();
    let shift = store
        .get(&format!("{prefix}.shift"))
        .unwrap()
        .tensor
        .data()
        .to_vec();
    let y = batch_norm_naive(x.data(), (s.n, s.c, s.h, s.w), &scale, &shift, BN_EPS);
    let y = if act {
        y.into_iter().map(silu).collect()
    } else {
        y
    };
    Tensor::from_vec(s, y).unwrap()
}

fn data(store: &ParamStore<f64>, key: &str) -> Vec<f64> {
    store.get(key).unwrap().tensor.data().to_vec()
}

fn cbs_naive(
    x: &Tensor<f64>,
    store: &ParamStore<f64>,
    p: &str,
    cout: usize,
    k: usize,
) -> Tensor<f64> {
    let y = naive_conv(
        x,
        &data(store, &format!("{p}.conv.weight")),
        (cout, x.shape().c, k),
        k / 2,
        1,
    );
    bn_silu_naive(&y, store, &format!("{p}.bn"), true)
}

#[test]
fn conv_bn_silu_shape_and_count() {
    let spec = BlockSpec::ConvBnSilu {
        c_in: 3,
        c_out: 16,
        kernel: 3,
        stride: 1,
    };
    let store = build(&spec, 0);
    assert_eq!(spec.trainable_params(), 464);
    assert_eq!(store.trainable_count(), 464);
    assert_eq!(store.total_count(), 496);
    let x = Tensor::randn(Shape::new(1, 3, 8, 8), 1.0, &mut rng(1));
    assert_eq!(
        run(&spec, &store, &x, Mode::Train).shape(),
        Shape::new(1, 16, 8, 8)
    );
    let bad = Tensor::randn(Shape::new(1, 4, 8, 8), 1.0, &mut rng(1));
    let mut tape = Tape::new();
    let xv = tape.constant(bad);
    let mut f = Forward::new(&mut tape, &store, Mode::Train);
    assert!(matches!(
        spec.forward(&mut f, "block0", xv),
        Err(BlockError::Tensor(_))
    ));
}

#[test]
fn conv_bn_silu_zero_input_gives_silu_of_shift() {
    let spec = BlockSpec::ConvBnSilu {
        c_in: 3,
        c_out: 4,
        kernel: 3,
        stride: 1,
    };
    let mut store = build(&spec, 0);
    perturb(&mut store, 3);
    let x = Tensor::zeros(Shape::new(2, 3, 5, 5));
    let shift = data(&store, "block0.bn.shift");
    for mode in [Mode::Train, Mode::Eval] {
        let y = run(&spec, &store, &x, mode);
        for n in 0..2 {
            for c in 0..4 {
                for i in 0..25 {
                    let got = y.get(n, c, i / 5, i % 5);
                    assert!((got - silu(shift[c])).abs() < 1e-12, "{mode:?} c{c}: {got}");
                }
            }
        }
    }
}

#[test]
fn dual_conv_with_one_group_is_dense_3x3_plus_1x1() {
    let spec = BlockSpec::DualConv {
        c_in: 4,
        c_out: 6,
        groups: 1,
    };
    let mut store = build(&spec, 2);
    perturb(&mut store, 2);
    let x = Tensor::randn(Shape::new(2, 4, 6, 6), 1.0, &mut rng(3));
    let t = |k: &str| store.get(k).unwrap().tensor.clone();
    let a = ops::conv2d(&x, &t("block0.gc.weight"), None, ConvParams::new(1, 1, 1)).unwrap();
    let b = ops::conv2d(&x, &t("block0.pw.weight"), None, ConvParams::default()).unwrap();
    let sum = ops::add(&a, &b).unwrap();
    let want = bn_silu_naive(&sum, &store, "block0.bn", true);
    let got = run(&spec, &store, &x, Mode::Train);
    assert!(got.max_abs_diff(&want) < 1e-6);
}

#[test]
fn dual_conv_matches_block_diagonal_oracle() {
    let spec = BlockSpec::DualConv {
        c_in: 8,
        c_out: 8,
        groups: 2,
    };
    let mut store = build(&spec, 4);
    perturb(&mut store, 4);
    let x = Tensor::randn(Shape::new(2, 8, 6, 6), 1.0, &mut rng(5));
    let dense = block_diagonal_weight(&data(&store, "block0.gc.weight"), (8, 4, 3, 3), 2);
    let a = naive_conv(&x, &dense, (8, 8, 3), 1, 1);
    let b = naive_conv(&x, &data(&store, "block0.pw.weight"), (8, 8, 1), 0, 1);
    let sum: Vec<f64> = a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect();
    let want = bn_silu_naive(
        &Tensor::from_vec(a.shape(), sum).unwrap(),
        &store,
        "block0.bn",
        true,
    );
    let got = run(&spec, &store, &x, Mode::Train);
    assert!(got.max_abs_diff(&want) < 1e-5);
}

#[test]
fn dual_conv_weight_count() {
    let dual = BlockSpec::DualConv {
        c_in: 64,
        c_out: 64,
        groups: 2,
    };
    let plain = BlockSpec::ConvBnSilu {
        c_in: 64,
        c_out: 64,
        kernel: 3,
        stride: 1,
    };
    assert_eq!(dual.trainable_params() - 128, 22_528);
    assert_eq!(plain.trainable_params() - 128, 36_864);
    let reduction: f64 = 1.0 - 22_528.0 / 36_864.0;
    assert!((reduction - 0.389).abs() < 1e-3);
    assert!(BlockSpec::DualConv {
        c_in: 6,
        c_out: 6,
        groups: 4
    }
    .validate()
    .is_err());
}

#[test]
fn c2f_shapes_and_dual_saving() {
    let plain = BlockSpec::C2f {
        c_in: 64,
        c_out: 64,
        repeats: 1,
        shortcut: true,
        dual_groups: None,
    };
    let dual = BlockSpec::C2f {
        c_in: 64,
        c_out: 64,
        repeats: 1,
        shortcut: true,
        dual_groups: Some(2),
    };
    let x = Tensor::randn(Shape::new(1, 64, 16, 16), 1.0, &mut rng(6));
    for spec in [&plain, &dual] {
        let store = build(spec, 7);
        assert_eq!(store.trainable_count(), spec.trainable_params());
        assert_eq!(
            run(spec, &store, &x, Mode::Eval).shape(),
            Shape::new(1, 64, 16, 16)
        );
    }
    // Two 3x3 convs on 32 channels: 9*32*32 each versus 9*32*16 + 32*32.
    let saved = 2 * (9 * 32 * 32 - (9 * 32 * 16 + 32 * 32));
    assert_eq!(plain.trainable_params() - dual.trainable_params(), saved);
}

#[test]
fn c2f_matches_composed_oracle() {
    let spec = BlockSpec::C2f {
        c_in: 6,
        c_out: 8,
        repeats: 2,
        shortcut: true,
        dual_groups: None,
    };
    let mut store = build(&spec, 8);
    perturb(&mut store, 8);
    let x = Tensor::randn(Shape::new(2, 6, 5, 5), 1.0, &mut rng(9));
    let y = cbs_naive(&x, &store, "block0.cv1", 8, 1);
    let mut parts = vec![y.channels(0, 4), y.channels(4, 4)];
    for j in 0..2 {
        let last = parts.last().unwrap().clone();
        let h = cbs_naive(&last, &store, &format!("block0.m{j}.cv1"), 4, 3);
        let h = cbs_naive(&h, &store, &format!("block0.m{j}.cv2"), 4, 3);
        parts.push(ops::add(&last, &h).unwrap());
    }
    let refs: Vec<&Tensor<f64>> = parts.iter().collect();
    let cat = ops::concat_channels(&refs).unwrap();
    let want = cbs_naive(&cat, &store, "block0.cv2", 8, 1);
    assert!(run(&spec, &store, &x, Mode::Train).max_abs_diff(&want) < 1e-9);
}

#[test]
fn serial_pools_equal_parallel_pools_exactly() {
    let x = Tensor::<f64>::randn(Shape::new(2, 3, 11, 9), 1.0, &mut rng(10));
    let p5 = PoolParams::new(PoolKind::Max, 5, 1, 2);
    let y1 = ops::pool(&x, p5).unwrap();
    let y2 = ops::pool(&y1, p5).unwrap();
    let y3 = ops::pool(&y2, p5).unwrap();
    let dims = (2, 3, 11, 9);
    assert_eq!(
        y1.data(),
        max_pool_naive(x.data(), dims, 5, 1, 2).as_slice()
    );
    assert_eq!(
        y2.data(),
        max_pool_naive(x.data(), dims, 9, 1, 4).as_slice()
    );
    assert_eq!(
        y3.data(),
        max_pool_naive(x.data(), dims, 13, 1, 6).as_slice()
    );

    let c = Tensor::full(Shape::new(1, 2, 6, 6), 0.75);
    let pooled = ops::pool(&ops::pool(&c, p5).unwrap(), p5).unwrap();
    assert!(pooled.data().iter().all(|&v| v == 0.75));
}

#[test]
fn sppf_matches_parallel_pool_oracle() {
    let spec = BlockSpec::Sppf {
        c_in: 8,
        c_out: 6,
        kernel: 5,
    };
    let mut store = build(&spec, 11);
    perturb(&mut store, 11);
    let x = Tensor::randn(Shape::new(2, 8, 7, 7), 1.0, &mut rng(12));
    let y = cbs_naive(&x, &store, "block0.cv1", 4, 1);
    let dims = (2, 4, 7, 7);
    let mut parts = vec![y.clone()];
    for (k, p) in [(5, 2), (9, 4), (13, 6)] {
        parts.push(Tensor::from_vec(y.shape(), max_pool_naive(y.data(), dims, k, 1, p)).unwrap());
    }
    let refs: Vec<&Tensor<f64>> = parts.iter().collect();
    let cat = ops::concat_channels(&refs).unwrap();
    let want = cbs_naive(&cat, &store, "block0.cv2", 6, 1);
    assert!(run(&spec, &store, &x, Mode::Train).max_abs_diff(&want) < 1e-9);

    let big = BlockSpec::Sppf {
        c_in: 64,
        c_out: 64,
        kernel: 5,
    };
    let store = build(&big, 0);
    let x = Tensor::randn(Shape::new(1, 64, 20, 20), 1.0, &mut rng(0));
    assert_eq!(
        run(&big, &store, &x, Mode::Eval).shape(),
        Shape::new(1, 64, 20, 20)
    );
}

#[test]
fn ema_preserves_shape() {
    for (n, c, h, w, g) in [
        (1, 16, 5, 7, 8),
        (2, 8, 4, 4, 2),
        (3, 6, 3, 1, 3),
        (1, 4, 1, 1, 4),
    ] {
        let spec = BlockSpec::Ema {
            channels: c,
            groups: g,
        };
        let store = build(&spec, 13);
        let x = Tensor::randn(Shape::new(n, c, h, w), 1.0, &mut rng(14));
        assert_eq!(run(&spec, &store, &x, Mode::Eval).shape(), x.shape());
    }
    assert!(BlockSpec::Ema {
        channels: 10,
        groups: 4
    }
    .validate()
    .is_err());
}

#[test]
fn ema_is_equivariant_to_group_permutation() {
    let spec = BlockSpec::Ema {
        channels: 6,
        groups: 2,
    };
    let mut store = build(&spec, 15);
    perturb(&mut store, 15);
    let x = Tensor::randn(Shape::new(2, 6, 5, 4), 1.0, &mut rng(16));
    let swap = |t: &Tensor<f64>| {
        let mut out = Vec::new();
        for n in 0..t.shape().n {
            let s = t.sample(n);
            out.extend_from_slice(s.channels(3, 3).data());
            out.extend_from_slice(s.channels(0, 3).data());
        }
        Tensor::from_vec(t.shape(), out).unwrap()
    };
    let y = run(&spec, &store, &x, Mode::Train);
    let y_swapped = run(&spec, &store, &swap(&x), Mode::Train);
    assert_eq!(y_swapped.data(), swap(&y).data());
}

#[test]
fn ema_gate_lies_strictly_inside_unit_interval() {
    let spec = BlockSpec::Ema {
        channels: 8,
        groups: 2,
    };
    let mut store = build(&spec, 17);
    perturb(&mut store, 17);
    let x = Tensor::randn(Shape::new(2, 8, 6, 6), 1.0, &mut rng(18));
    let y = run(&spec, &store, &x, Mode::Train);
    for (&o, &i) in y.data().iter().zip(x.data()) {
        if i.abs() > 1e-6 {
            let ratio = o / i;
            assert!(ratio > 0.0 && ratio < 1.0, "ratio {ratio}");
        }
    }
}

#[test]
fn ema_with_zero_convs_and_flat_norm_is_uniform_gating() {
    let (c, g) = (8, 2);
    let spec = BlockSpec::Ema {
        channels: c,
        groups: g,
    };
    let mut store = build(&spec, 19);
    perturb(&mut store, 19);
    for key in [
        "block0.conv1x1.weight",
        "block0.conv3x3.weight",
        "block0.gn.shift",
        "block0.gn.scale",
    ] {
        store.get_mut(key).unwrap().tensor.data_mut().fill(0.0);
    }
    let x = Tensor::randn(Shape::new(2, c, 5, 6), 1.0, &mut rng(20));
    let y = run(&spec, &store, &x, Mode::Train);
    let cg = c / g;
    for n in 0..2 {
        for grp in 0..g {
            let s = y.get(n, grp * cg, 0, 0) / x.get(n, grp * cg, 0, 0);
            assert!(s > 0.0 && s < 1.0);
            for ch in grp * cg..(grp + 1) * cg {
                for i in 0..5 {
                    for j in 0..6 {
                        assert!((y.get(n, ch, i, j) - s * x.get(n, ch, i, j)).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn ema_param_count_closed_form() {
    for (c, g, want) in [(64, 8, 672), (128, 8, 2_624), (256, 8, 10_368)] {
        let spec = BlockSpec::Ema {
            channels: c,
            groups: g,
        };
        assert_eq!(spec.trainable_params(), want);
        assert_eq!(build(&spec, 0).trainable_count(), want);
    }
}

#[test]
fn scdd_shape_count_and_zero_input() {
    let spec = BlockSpec::Scdd {
        c_in: 32,
        c_out: 64,
    };
    let mut store = build(&spec, 21);
    let x = Tensor::randn(Shape::new(1, 32, 16, 16), 1.0, &mut rng(22));
    assert_eq!(
        run(&spec, &store, &x, Mode::Eval).shape(),
        Shape::new(1, 64, 8, 8)
    );
    assert_eq!(spec.trainable_params(), 32 * 64 + 64 * 9 + 4 * 64);
    let plain = BlockSpec::ConvBnSilu {
        c_in: 32,
        c_out: 64,
        kernel: 3,
        stride: 2,
    };
    assert!(spec.trainable_params() < plain.trainable_params());

    let shift: Vec<f64> = (0..64).map(|c| c as f64 * 0.1 - 3.0).collect();
    store
        .get_mut("block0.dw.bn.shift")
        .unwrap()
        .tensor
        .data_mut()
        .copy_from_slice(&shift);
    let y = run(
        &spec,
        &store,
        &Tensor::zeros(Shape::new(1, 32, 16, 16)),
        Mode::Eval,
    );
    for c in 0..64 {
        for i in 0..64 {
            assert_eq!(y.get(0, c, i / 8, i % 8), shift[c]);
        }
    }

    let odd = Tensor::randn(Shape::new(1, 32, 15, 16), 1.0, &mut rng(22));
    let mut tape = Tape::new();
    let xv = tape.constant(odd);
    let mut f = Forward::new(&mut tape, &store, Mode::Eval);
    assert!(spec.forward(&mut f, "block0", xv).is_err());
}

fn head_shapes(nc: usize, channels: [usize; 3], image: usize) -> Vec<(Shape, Shape)> {
    let spec = BlockSpec::DetectHead {
        channels,
        num_classes: nc,
        reg_max: 16,
        lightweight_cls: false,
    };
    let store: ParamStore<f32> = {
        let mut s = ParamStore::new();
        spec.init("head", &mut s, &mut rng(23)).unwrap();
        s
    };
    let mut tape = Tape::<f32>::new();
    let feats: Vec<_> = [8, 16, 32]
        .iter()
        .zip(channels)
        .map(|(&s, c)| {
            tape.constant(Tensor::randn(
                Shape::new(2, c, image / s, image / s),
                1.0,
                &mut rng(24),
            ))
        })
        .collect();
    let mut f = Forward::new(&mut tape, &store, Mode::Eval);
    let outs = spec.forward_head(&mut f, "head", &feats).unwrap();
    outs.iter()
        .map(|o| (tape.value(o.cls).shape(), tape.value(o.box_dist).shape()))
        .collect()
}

#[test]
fn head_output_shapes_follow_strides() {
    let shapes = head_shapes(200, [64, 128, 256], 160);
    for (i, side) in [20, 10, 5].iter().enumerate() {
        assert_eq!(shapes[i].0, Shape::new(2, 200, *side, *side));
        assert_eq!(shapes[i].1, Shape::new(2, 64, *side, *side));
    }
    let shapes = head_shapes(1, [16, 32, 64], 64);
    assert_eq!(shapes[2].0, Shape::new(2, 1, 2, 2));
}

#[test]
fn head_rejects_wrong_scale_count() {
    let spec = BlockSpec::DetectHead {
        channels: [4, 4, 4],
        num_classes: 2,
        reg_max: 2,
        lightweight_cls: false,
    };
    let store = build(&spec, 0);
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(Shape::new(1, 4, 4, 4)));
    let mut f = Forward::new(&mut tape, &store, Mode::Eval);
    assert!(matches!(
        spec.forward_head(&mut f, "block0", &[a, a]),
        Err(BlockError::InvalidSpec(_))
    ));
    assert!(spec.forward_head(&mut f, "block0", &[a, a, a]).is_err());
}

#[test]
fn running_stats_update_blends_with_momentum() {
    let spec = BlockSpec::ConvBnSilu {
        c_in: 2,
        c_out: 3,
        kernel: 1,
        stride: 1,
    };
    let mut store = build(&spec, 25);
    let x = Tensor::randn(Shape::new(4, 2, 3, 3), 1.0, &mut rng(26));
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let mut f = Forward::new(&mut tape, &store, Mode::Train);
    spec.forward(&mut f, "block0", xv).unwrap();
    let stats = f.take_bn_stats();
    assert_eq!(stats.len(), 1);
    assert_eq!(stats[0].0, "block0.bn");
    update_running_stats(&mut store, &stats, 0.25).unwrap();
    let rm = data(&store, "block0.bn.running_mean");
    let rv = data(&store, "block0.bn.running_var");
    for c in 0..3 {
        assert!((rm[c] - 0.25 * stats[0].1.mean[c]).abs() < 1e-12);
        assert!((rv[c] - (0.75 + 0.25 * stats[0].1.var[c])).abs() < 1e-12);
    }
}

// The acceptance suite runs the heads at the full seed count too; here
// they get a few seeds to keep this file fast.
#[test]
fn every_block_passes_grad_check() {
    for (spec, inputs) in grad_check_specs() {
        let seeds = if matches!(spec, BlockSpec::DetectHead { .. }) {
            3
        } else {
            GRAD_CHECK_SEEDS
        };
        for seed in 0..seeds {
            let report = block_grad_check(&spec, &inputs, seed, 1e-3);
            assert!(report.pass, "{:?} seed {seed}: {report:?}", spec.kind());
        }
    }
}

#[test]
fn flop_count_of_single_conv() {
    let spec = BlockSpec::ConvBnSilu {
        c_in: 3,
        c_out: 16,
        kernel: 3,
        stride: 1,
    };
    let (f, out) = spec.flops(Shape::new(1, 3, 640, 640)).unwrap();
    assert_eq!(out, Shape::new(1, 16, 640, 640));
    assert_eq!(f.conv, 2 * 9 * 3 * 16 * 640 * 640);
    assert!((f.conv as f64 / 1e9 - 0.3539).abs() < 1e-4);
    assert_eq!(f.pointwise, 2 * 16 * 640 * 640);
}

fn spec_strategy() -> impl Strategy<Value = BlockSpec> {
    let g = prop_oneof![Just(1usize), Just(2), Just(4)];
    prop_oneof![
        (
            1usize..9,
            1usize..9,
            prop_oneof![Just(1usize), Just(3)],
            1usize..3
        )
            .prop_map(|(c_in, c_out, kernel, stride)| BlockSpec::ConvBnSilu {
                c_in,
                c_out,
                kernel,
                stride
            }),
        (1usize..4, 1usize..4, g.clone()).prop_map(|(a, b, groups)| BlockSpec::DualConv {
            c_in: a * groups,
            c_out: b * groups,
            groups
        }),
        (1usize..4, any::<bool>(), proptest::option::of(g.clone())).prop_map(
            |(a, shortcut, dg)| {
                let c = a * dg.unwrap_or(1);
                BlockSpec::Bottleneck {
                    c_in: c,
                    c_out: c,
                    shortcut,
                    dual_groups: dg,
                }
            }
        ),
        (
            1usize..9,
            1usize..4,
            1usize..4,
            any::<bool>(),
            proptest::option::of(g.clone())
        )
            .prop_map(|(c_in, half, repeats, shortcut, dg)| BlockSpec::C2f {
                c_in,
                c_out: 2 * half * dg.unwrap_or(1),
                repeats,
                shortcut,
                dual_groups: dg,
            }),
        (1usize..5, 1usize..9).prop_map(|(h, c_out)| BlockSpec::Sppf {
            c_in: 2 * h,
            c_out,
            kernel: 5
        }),
        (1usize..4, g).prop_map(|(a, groups)| BlockSpec::Ema {
            channels: a * groups,
            groups
        }),
        (1usize..9, 1usize..9).prop_map(|(c_in, c_out)| BlockSpec::Scdd { c_in, c_out }),
        (
            1usize..5,
            1usize..5,
            1usize..5,
            1usize..5,
            1usize..4,
            any::<bool>()
        )
            .prop_map(
                |(a, b, c, nc, reg_max, lightweight_cls)| BlockSpec::DetectHead {
                    channels: [4 * a, 4 * b, 4 * c],
                    num_classes: nc,
                    reg_max,
                    lightweight_cls,
                }
            ),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn closed_form_counts_match_constructed_store(spec in spec_strategy(), seed in 0u64..1000) {
        let mut a = ParamStore::<f32>::new();
        spec.init("block3", &mut a, &mut rng(seed)).unwrap();
        prop_assert_eq!(a.trainable_count(), spec.trainable_params());
        prop_assert_eq!(a.total_count(), spec.trainable_params() + spec.buffer_params());
        let mut b = ParamStore::<f32>::new();
        spec.init("block3", &mut b, &mut rng(seed + 1)).unwrap();
        prop_assert!(a.keys().eq(b.keys()));
        prop_assert!(a.keys().all(|k| k.starts_with("block3.")));
    }

    #[test]
    fn flop_shapes_agree_with_forward(spec in spec_strategy(), seed in 0u64..1000) {
        let store = build(&spec, seed);
        let mut tape = Tape::new();
        let (out_shape, flop_shape) = if let BlockSpec::DetectHead { channels, .. } = spec {
            let shapes: Vec<Shape> = (0..3).map(|i| Shape::new(1, channels[i], 8 >> i, 8 >> i)).collect();
            let vars: Vec<_> = shapes.iter().map(|&s| tape.constant(Tensor::zeros(s))).collect();
            let mut f = Forward::new(&mut tape, &store, Mode::Eval);
            let outs = spec.forward_head(&mut f, "block0", &vars).unwrap();
            (tape.value(outs[2].cls).shape(), spec.head_flops(&shapes).unwrap().1)
        } else {
            let c_in = match spec {
                BlockSpec::ConvBnSilu { c_in, .. }
                | BlockSpec::DualConv { c_in, .. }
                | BlockSpec::Bottleneck { c_in, .. }
                | BlockSpec::C2f { c_in, .. }
                | BlockSpec::Sppf { c_in, .. }
                | BlockSpec::Scdd { c_in, .. } => c_in,
                BlockSpec::Ema { channels, .. } => channels,
                BlockSpec::DetectHead { .. } => unreachable!(),
            };
            let s = Shape::new(1, c_in, 6, 6);
            let x = tape.constant(Tensor::randn(s, 1.0, &mut rng(seed)));
            let mut f = Forward::new(&mut tape, &store, Mode::Eval);
            let y = spec.forward(&mut f, "block0", x).unwrap();
            (tape.value(y).shape(), spec.flops(s).unwrap().1)
        };
        prop_assert_eq!(out_shape, flop_shape);
    }
}
