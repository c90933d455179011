use rand::Rng;

use super::params::{channel_vec, conv_bias, conv_weight};
use super::{BlockError, BlockSpec, Forward, Mode, ParamStore, Result};
use crate::tensor::kernels::{conv_out_dim, pool_out_shape};
use crate::tensor::{
    ConvParams, Element, FlopCount, PoolKind, PoolParams, Shape, TensorError, Var,
};

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.03;
const GN_EPS: f64 = 1e-5;
/// Image size assumed by the class-bias prior of the head.
pub const HEAD_BIAS_IMAGE: f64 = 640.0;
const HEAD_STRIDES: [usize; 3] = [8, 16, 32];

/// Head outputs at one stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleOutput {
    pub cls: Var,
    pub box_dist: Var,
}

pub(crate) fn head_widths(channels: [usize; 3], nc: usize, reg_max: usize) -> (usize, usize) {
    let c2 = 16.max(channels[0] / 4).max(4 * reg_max);
    let c3 = channels[0].max(nc.min(100));
    (c2, c3)
}

// ---------------------------------------------------------------- init

struct Init<'s, T: Element, R: Rng + ?Sized> {
    store: &'s mut ParamStore<T>,
    rng: &'s mut R,
}

impl<T: Element, R: Rng + ?Sized> Init<'_, T, R> {
    fn weight(&mut self, key: String, c_out: usize, c_in_per_group: usize, k: usize) {
        let w = conv_weight(Shape::new(c_out, c_in_per_group, k, k), self.rng);
        self.store.insert(key, w, true);
    }

    fn bias(&mut self, key: String, c_out: usize, fan_in: usize) {
        let b = conv_bias(c_out, fan_in, self.rng);
        self.store.insert(key, b, true);
    }

    fn bn(&mut self, p: &str, c: usize) {
        self.store
            .insert(format!("{p}.scale"), channel_vec(c, 1.0), true);
        self.store
            .insert(format!("{p}.shift"), channel_vec(c, 0.0), true);
        self.store
            .insert(format!("{p}.running_mean"), channel_vec(c, 0.0), false);
        self.store
            .insert(format!("{p}.running_var"), channel_vec(c, 1.0), false);
    }

    fn cbs(&mut self, p: &str, c_in: usize, c_out: usize, k: usize, groups: usize) {
        self.weight(format!("{p}.conv.weight"), c_out, c_in / groups, k);
        self.bn(&format!("{p}.bn"), c_out);
    }

    fn dual(&mut self, p: &str, c_in: usize, c_out: usize, g: usize) {
        self.weight(format!("{p}.gc.weight"), c_out, c_in / g, 3);
        self.weight(format!("{p}.pw.weight"), c_out, c_in, 1);
        self.bn(&format!("{p}.bn"), c_out);
    }

    fn bottleneck(&mut self, p: &str, c_in: usize, c_out: usize, dual: Option<usize>) {
        match dual {
            Some(g) => {
                self.dual(&format!("{p}.cv1"), c_in, c_out, g);
                self.dual(&format!("{p}.cv2"), c_out, c_out, g);
            }
            None => {
                self.cbs(&format!("{p}.cv1"), c_in, c_out, 3, 1);
                self.cbs(&format!("{p}.cv2"), c_out, c_out, 3, 1);
            }
        }
    }

    fn plain_conv(&mut self, p: &str, c_in: usize, c_out: usize) {
        self.weight(format!("{p}.weight"), c_out, c_in, 1);
        self.bias(format!("{p}.bias"), c_out, c_in);
    }
}

pub(crate) fn init<T: Element, R: Rng + ?Sized>(
    spec: &BlockSpec,
    p: &str,
    store: &mut ParamStore<T>,
    rng: &mut R,
) {
    let mut it = Init { store, rng };
    match *spec {
        BlockSpec::ConvBnSilu {
            c_in,
            c_out,
            kernel,
            ..
        } => it.cbs(p, c_in, c_out, kernel, 1),
        BlockSpec::DualConv {
            c_in,
            c_out,
            groups,
        } => it.dual(p, c_in, c_out, groups),
        BlockSpec::Bottleneck {
            c_in,
            c_out,
            dual_groups,
            ..
        } => it.bottleneck(p, c_in, c_out, dual_groups),
        BlockSpec::C2f {
            c_in,
            c_out,
            repeats,
            dual_groups,
            ..
        } => {
            let c = c_out / 2;
            it.cbs(&format!("{p}.cv1"), c_in, 2 * c, 1, 1);
            for j in 0..repeats {
                it.bottleneck(&format!("{p}.m{j}"), c, c, dual_groups);
            }
            it.cbs(&format!("{p}.cv2"), (2 + repeats) * c, c_out, 1, 1);
        }
        BlockSpec::Sppf { c_in, c_out, .. } => {
            let c = c_in / 2;
            it.cbs(&format!("{p}.cv1"), c_in, c, 1, 1);
            it.cbs(&format!("{p}.cv2"), 4 * c, c_out, 1, 1);
        }
        BlockSpec::Ema { channels, groups } => {
            let cg = channels / groups;
            it.weight(format!("{p}.conv1x1.weight"), cg, cg, 1);
            it.bias(format!("{p}.conv1x1.bias"), cg, cg);
            it.weight(format!("{p}.conv3x3.weight"), cg, cg, 3);
            it.bias(format!("{p}.conv3x3.bias"), cg, 9 * cg);
            it.store
                .insert(format!("{p}.gn.scale"), channel_vec(cg, 1.0), true);
            it.store
                .insert(format!("{p}.gn.shift"), channel_vec(cg, 0.0), true);
        }
        BlockSpec::Scdd { c_in, c_out } => {
            it.cbs(&format!("{p}.pw"), c_in, c_out, 1, 1);
            it.cbs(&format!("{p}.dw"), c_out, c_out, 3, c_out);
        }
        BlockSpec::DetectHead {
            channels,
            num_classes,
            reg_max,
            lightweight_cls,
        } => {
            let (c2, c3) = head_widths(channels, num_classes, reg_max);
            for (i, &ch) in channels.iter().enumerate() {
                let bp = format!("{p}.box{i}");
                it.cbs(&format!("{bp}.0"), ch, c2, 3, 1);
                it.cbs(&format!("{bp}.1"), c2, c2, 3, 1);
                it.plain_conv(&format!("{bp}.2"), c2, 4 * reg_max);
                fill(it.store, &format!("{bp}.2.bias"), 1.0);

                let cp = format!("{p}.cls{i}");
                if lightweight_cls {
                    it.cbs(&format!("{cp}.0a"), ch, ch, 3, ch);
                    it.cbs(&format!("{cp}.0b"), ch, c3, 1, 1);
                    it.cbs(&format!("{cp}.1a"), c3, c3, 3, c3);
                    it.cbs(&format!("{cp}.1b"), c3, c3, 1, 1);
                } else {
                    it.cbs(&format!("{cp}.0"), ch, c3, 3, 1);
                    it.cbs(&format!("{cp}.1"), c3, c3, 3, 1);
                }
                it.plain_conv(&format!("{cp}.2"), c3, num_classes);
                let cells = (HEAD_BIAS_IMAGE / HEAD_STRIDES[i] as f64).powi(2);
                let prior = (5.0 / num_classes as f64 / cells).ln();
                fill(it.store, &format!("{cp}.2.bias"), prior);
            }
        }
    }
}

fn fill<T: Element>(store: &mut ParamStore<T>, key: &str, v: f64) {
    let p = store.get_mut(key).expect("bias was just inserted");
    p.tensor.data_mut().fill(T::from_f64(v));
}

// ---------------------------------------------------------------- forward

fn bn<T: Element>(f: &mut Forward<'_, T>, p: &str, x: Var) -> Result<Var> {
    let scale = f.param(&format!("{p}.scale"))?;
    let shift = f.param(&format!("{p}.shift"))?;
    match f.mode() {
        Mode::Train => {
            let (y, stats) = f.tape.batch_norm(x, scale, shift, BN_EPS)?;
            f.record_bn(p, stats);
            Ok(y)
        }
        Mode::Eval => {
            let rm = f.buffer(&format!("{p}.running_mean"))?;
            let rv = f.buffer(&format!("{p}.running_var"))?;
            Ok(f.tape.batch_norm_eval(x, scale, shift, rm, rv, BN_EPS)?)
        }
    }
}

fn cbs<T: Element>(
    f: &mut Forward<'_, T>,
    p: &str,
    x: Var,
    k: usize,
    stride: usize,
    groups: usize,
    act: bool,
) -> Result<Var> {
    let w = f.param(&format!("{p}.conv.weight"))?;
    let y = f
        .tape
        .conv2d(x, w, None, ConvParams::new(stride, k / 2, groups))?;
    let y = bn(f, &format!("{p}.bn"), y)?;
    if act {
        Ok(f.tape.silu(y)?)
    } else {
        Ok(y)
    }
}

fn dual<T: Element>(f: &mut Forward<'_, T>, p: &str, x: Var, g: usize) -> Result<Var> {
    let wg = f.param(&format!("{p}.gc.weight"))?;
    let wp = f.param(&format!("{p}.pw.weight"))?;
    let a = f.tape.conv2d(x, wg, None, ConvParams::new(1, 1, g))?;
    let b = f.tape.conv2d(x, wp, None, ConvParams::default())?;
    let y = f.tape.add(a, b)?;
    let y = bn(f, &format!("{p}.bn"), y)?;
    Ok(f.tape.silu(y)?)
}

fn bottleneck<T: Element>(
    f: &mut Forward<'_, T>,
    p: &str,
    x: Var,
    shortcut: bool,
    dual_groups: Option<usize>,
) -> Result<Var> {
    let (cv1, cv2) = (format!("{p}.cv1"), format!("{p}.cv2"));
    let y = match dual_groups {
        Some(g) => {
            let h = dual(f, &cv1, x, g)?;
            dual(f, &cv2, h, g)?
        }
        None => {
            let h = cbs(f, &cv1, x, 3, 1, 1, true)?;
            cbs(f, &cv2, h, 3, 1, 1, true)?
        }
    };
    let same = f.tape.value(x).shape() == f.tape.value(y).shape();
    if shortcut && same {
        Ok(f.tape.add(x, y)?)
    } else {
        Ok(y)
    }
}

fn plain_conv<T: Element>(f: &mut Forward<'_, T>, p: &str, x: Var, k: usize) -> Result<Var> {
    let w = f.param(&format!("{p}.weight"))?;
    let b = f.param(&format!("{p}.bias"))?;
    Ok(f.tape.conv2d(x, w, Some(b), ConvParams::new(1, k / 2, 1))?)
}

fn expect_channels<T: Element>(
    f: &Forward<'_, T>,
    x: Var,
    c: usize,
    op: &'static str,
) -> Result<()> {
    let s = f.tape.value(x).shape();
    if s.c != c {
        return Err(TensorError::dim(op, format!("expected {c} channels, got {s}")).into());
    }
    Ok(())
}

fn ema<T: Element>(f: &mut Forward<'_, T>, p: &str, x: Var, g: usize) -> Result<Var> {
    let gx = f.tape.group_fold(x, g)?;
    let s = f.tape.value(gx).shape();
    let (bg, cg, h, w) = (s.n, s.c, s.h, s.w);

    let w1 = f.param(&format!("{p}.conv1x1.weight"))?;
    let b1 = f.param(&format!("{p}.conv1x1.bias"))?;
    let xh = f.tape.pool(gx, PoolParams::global(PoolKind::XAvg))?;
    let xw = f.tape.pool(gx, PoolParams::global(PoolKind::YAvg))?;
    // The same 1x1 conv on each half equals conv over their spatial concat.
    let hh = f.tape.conv2d(xh, w1, Some(b1), ConvParams::default())?;
    let hw = f.tape.conv2d(xw, w1, Some(b1), ConvParams::default())?;
    let sh = f.tape.sigmoid(hh)?;
    let sw = f.tape.sigmoid(hw)?;
    let gated = f.tape.mul(gx, sh)?;
    let gated = f.tape.mul(gated, sw)?;
    let gs = f.param(&format!("{p}.gn.scale"))?;
    let gb = f.param(&format!("{p}.gn.shift"))?;
    let x1 = f.tape.group_norm(gated, cg, gs, gb, GN_EPS)?;

    let w3 = f.param(&format!("{p}.conv3x3.weight"))?;
    let b3 = f.param(&format!("{p}.conv3x3.bias"))?;
    let x2 = f.tape.conv2d(gx, w3, Some(b3), ConvParams::new(1, 1, 1))?;

    let m1 = ema_cross(f, x1, x2)?;
    let m2 = ema_cross(f, x2, x1)?;
    let weights = f.tape.add(m1, m2)?;
    let weights = f.tape.reshape(weights, Shape::new(bg, 1, h, w))?;
    let gate = f.tape.sigmoid(weights)?;
    let out = f.tape.mul(gx, gate)?;
    Ok(f.tape.group_unfold(out, g)?)
}

/// softmax(gap(a)) as a row vector times `b` flattened per channel.
fn ema_cross<T: Element>(f: &mut Forward<'_, T>, a: Var, b: Var) -> Result<Var> {
    let s = f.tape.value(b).shape();
    let pa = f.tape.pool(a, PoolParams::global(PoolKind::GlobalAvg))?;
    let sa = f.tape.softmax(pa, 1)?;
    let sa = f.tape.reshape(sa, Shape::new(s.n, 1, 1, s.c))?;
    let fb = f.tape.reshape(b, Shape::new(s.n, 1, s.c, s.plane()))?;
    Ok(f.tape.matmul(sa, fb)?)
}

pub(crate) fn forward<T: Element>(
    spec: &BlockSpec,
    f: &mut Forward<'_, T>,
    p: &str,
    x: Var,
) -> Result<Var> {
    match *spec {
        BlockSpec::ConvBnSilu {
            c_in,
            kernel,
            stride,
            ..
        } => {
            expect_channels(f, x, c_in, "conv_bn_silu")?;
            cbs(f, p, x, kernel, stride, 1, true)
        }
        BlockSpec::DualConv { c_in, groups, .. } => {
            expect_channels(f, x, c_in, "dual_conv")?;
            dual(f, p, x, groups)
        }
        BlockSpec::Bottleneck {
            c_in,
            shortcut,
            dual_groups,
            ..
        } => {
            expect_channels(f, x, c_in, "bottleneck")?;
            bottleneck(f, p, x, shortcut, dual_groups)
        }
        BlockSpec::C2f {
            c_in,
            c_out,
            repeats,
            shortcut,
            dual_groups,
        } => {
            expect_channels(f, x, c_in, "c2f")?;
            let c = c_out / 2;
            let y = cbs(f, &format!("{p}.cv1"), x, 1, 1, 1, true)?;
            let mut parts = f.tape.split(y, &[c, c])?;
            for j in 0..repeats {
                let last = *parts.last().expect("split yields two parts");
                let next = bottleneck(f, &format!("{p}.m{j}"), last, shortcut, dual_groups)?;
                parts.push(next);
            }
            let cat = f.tape.concat(&parts)?;
            cbs(f, &format!("{p}.cv2"), cat, 1, 1, 1, true)
        }
        BlockSpec::Sppf { c_in, kernel, .. } => {
            expect_channels(f, x, c_in, "sppf")?;
            let y = cbs(f, &format!("{p}.cv1"), x, 1, 1, 1, true)?;
            let pool = PoolParams::new(PoolKind::Max, kernel, 1, kernel / 2);
            let y1 = f.tape.pool(y, pool)?;
            let y2 = f.tape.pool(y1, pool)?;
            let y3 = f.tape.pool(y2, pool)?;
            let cat = f.tape.concat(&[y, y1, y2, y3])?;
            cbs(f, &format!("{p}.cv2"), cat, 1, 1, 1, true)
        }
        BlockSpec::Ema { channels, groups } => {
            expect_channels(f, x, channels, "ema")?;
            ema(f, p, x, groups)
        }
        BlockSpec::Scdd { c_in, c_out } => {
            expect_channels(f, x, c_in, "scdd")?;
            let s = f.tape.value(x).shape();
            if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
                return Err(TensorError::dim("scdd", format!("odd spatial size {s}")).into());
            }
            let y = cbs(f, &format!("{p}.pw"), x, 1, 1, 1, true)?;
            cbs(f, &format!("{p}.dw"), y, 3, 2, c_out, false)
        }
        BlockSpec::DetectHead { .. } => Err(BlockError::InvalidSpec(
            "detect_head takes three feature maps; use forward_head".into(),
        )),
    }
}

pub(crate) fn forward_head<T: Element>(
    spec: &BlockSpec,
    f: &mut Forward<'_, T>,
    p: &str,
    features: &[Var],
) -> Result<Vec<ScaleOutput>> {
    let BlockSpec::DetectHead {
        channels,
        num_classes,
        reg_max,
        lightweight_cls,
    } = *spec
    else {
        return Err(BlockError::InvalidSpec(format!(
            "{:?} is not a head",
            spec.kind()
        )));
    };
    if features.len() != 3 {
        return Err(BlockError::InvalidSpec(format!(
            "head needs 3 scales, got {}",
            features.len()
        )));
    }
    let shapes: Vec<Shape> = features.iter().map(|&v| f.tape.value(v).shape()).collect();
    for i in 1..3 {
        let (a, b) = (shapes[i - 1], shapes[i]);
        if a.h != 2 * b.h || a.w != 2 * b.w || a.n != b.n {
            return Err(TensorError::dim("detect_head", format!("scale {i}: {a} then {b}")).into());
        }
    }
    let mut out = Vec::with_capacity(3);
    for (i, &x) in features.iter().enumerate() {
        expect_channels(f, x, channels[i], "detect_head")?;
        let bp = format!("{p}.box{i}");
        let b = cbs(f, &format!("{bp}.0"), x, 3, 1, 1, true)?;
        let b = cbs(f, &format!("{bp}.1"), b, 3, 1, 1, true)?;
        let box_dist = plain_conv(f, &format!("{bp}.2"), b, 1)?;

        let cp = format!("{p}.cls{i}");
        let c = if lightweight_cls {
            let ch = channels[i];
            let c3 = head_widths(channels, num_classes, reg_max).1;
            let c = cbs(f, &format!("{cp}.0a"), x, 3, 1, ch, true)?;
            let c = cbs(f, &format!("{cp}.0b"), c, 1, 1, 1, true)?;
            let c = cbs(f, &format!("{cp}.1a"), c, 3, 1, c3, true)?;
            cbs(f, &format!("{cp}.1b"), c, 1, 1, 1, true)?
        } else {
            let c = cbs(f, &format!("{cp}.0"), x, 3, 1, 1, true)?;
            cbs(f, &format!("{cp}.1"), c, 3, 1, 1, true)?
        };
        let cls = plain_conv(f, &format!("{cp}.2"), c, 1)?;
        out.push(ScaleOutput { cls, box_dist });
    }
    Ok(out)
}

// ---------------------------------------------------------------- counts

fn cbs_count(c_in: usize, c_out: usize, k: usize, groups: usize) -> (usize, usize) {
    (k * k * (c_in / groups) * c_out + 2 * c_out, 2 * c_out)
}

fn dual_count(c_in: usize, c_out: usize, g: usize) -> (usize, usize) {
    (9 * (c_in / g) * c_out + c_in * c_out + 2 * c_out, 2 * c_out)
}

fn plus(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    (a.0 + b.0, a.1 + b.1)
}

fn bottleneck_count(c_in: usize, c_out: usize, dual: Option<usize>) -> (usize, usize) {
    match dual {
        Some(g) => plus(dual_count(c_in, c_out, g), dual_count(c_out, c_out, g)),
        None => plus(cbs_count(c_in, c_out, 3, 1), cbs_count(c_out, c_out, 3, 1)),
    }
}

/// (trainable, buffers) in closed form.
pub(crate) fn param_count(spec: &BlockSpec) -> (usize, usize) {
    match *spec {
        BlockSpec::ConvBnSilu {
            c_in,
            c_out,
            kernel,
            ..
        } => cbs_count(c_in, c_out, kernel, 1),
        BlockSpec::DualConv {
            c_in,
            c_out,
            groups,
        } => dual_count(c_in, c_out, groups),
        BlockSpec::Bottleneck {
            c_in,
            c_out,
            dual_groups,
            ..
        } => bottleneck_count(c_in, c_out, dual_groups),
        BlockSpec::C2f {
            c_in,
            c_out,
            repeats,
            dual_groups,
            ..
        } => {
            let c = c_out / 2;
            let mut t = plus(
                cbs_count(c_in, 2 * c, 1, 1),
                cbs_count((2 + repeats) * c, c_out, 1, 1),
            );
            for _ in 0..repeats {
                t = plus(t, bottleneck_count(c, c, dual_groups));
            }
            t
        }
        BlockSpec::Sppf { c_in, c_out, .. } => {
            let c = c_in / 2;
            plus(cbs_count(c_in, c, 1, 1), cbs_count(4 * c, c_out, 1, 1))
        }
        BlockSpec::Ema { channels, groups } => {
            let cg = channels / groups;
            (10 * cg * cg + 4 * cg, 0)
        }
        BlockSpec::Scdd { c_in, c_out } => plus(
            cbs_count(c_in, c_out, 1, 1),
            cbs_count(c_out, c_out, 3, c_out),
        ),
        BlockSpec::DetectHead {
            channels,
            num_classes,
            reg_max,
            lightweight_cls,
        } => {
            let (c2, c3) = head_widths(channels, num_classes, reg_max);
            let mut t = (0, 0);
            for &ch in &channels {
                t = plus(t, cbs_count(ch, c2, 3, 1));
                t = plus(t, cbs_count(c2, c2, 3, 1));
                t = plus(t, (c2 * 4 * reg_max + 4 * reg_max, 0));
                if lightweight_cls {
                    t = plus(t, cbs_count(ch, ch, 3, ch));
                    t = plus(t, cbs_count(ch, c3, 1, 1));
                    t = plus(t, cbs_count(c3, c3, 3, c3));
                    t = plus(t, cbs_count(c3, c3, 1, 1));
                } else {
                    t = plus(t, cbs_count(ch, c3, 3, 1));
                    t = plus(t, cbs_count(c3, c3, 3, 1));
                }
                t = plus(t, (c3 * num_classes + num_classes, 0));
            }
            t
        }
    }
}

// ---------------------------------------------------------------- flops

#[derive(Default)]
struct Counter {
    f: FlopCount,
}

impl Counter {
    fn conv(
        &mut self,
        s: Shape,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Shape> {
        let bad = || TensorError::dim("flops", format!("kernel {k} stride {stride} on {s}"));
        let ho = conv_out_dim(s.h, k, stride, k / 2).ok_or_else(bad)?;
        let wo = conv_out_dim(s.w, k, stride, k / 2).ok_or_else(bad)?;
        let out = Shape::new(s.n, c_out, ho, wo);
        self.f.conv += (2 * k * k * (s.c / groups)) as u64 * out.numel() as u64;
        Ok(out)
    }

    fn pointwise(&mut self, s: Shape) -> Shape {
        self.f.pointwise += s.numel() as u64;
        s
    }

    fn cbs(
        &mut self,
        s: Shape,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        act: bool,
    ) -> Result<Shape> {
        let out = self.conv(s, c_out, k, stride, groups)?;
        self.pointwise(out);
        if act {
            self.pointwise(out);
        }
        Ok(out)
    }

    fn dual(&mut self, s: Shape, c_out: usize, g: usize) -> Result<Shape> {
        let out = self.conv(s, c_out, 3, 1, g)?;
        self.conv(s, c_out, 1, 1, 1)?;
        self.pointwise(out); // sum
        self.pointwise(out); // norm
        self.pointwise(out); // silu
        Ok(out)
    }

    fn bottleneck(
        &mut self,
        s: Shape,
        c_out: usize,
        shortcut: bool,
        dual: Option<usize>,
    ) -> Result<Shape> {
        let out = match dual {
            Some(g) => {
                let h = self.dual(s, c_out, g)?;
                self.dual(h, c_out, g)?
            }
            None => {
                let h = self.cbs(s, c_out, 3, 1, 1, true)?;
                self.cbs(h, c_out, 3, 1, 1, true)?
            }
        };
        if shortcut && s == out {
            self.pointwise(out);
        }
        Ok(out)
    }

    fn pool(&mut self, s: Shape, p: PoolParams) -> Result<Shape> {
        Ok(self.pointwise(pool_out_shape(s, p)?))
    }
}

pub(crate) fn flops(spec: &BlockSpec, inputs: &[Shape]) -> Result<(FlopCount, Shape)> {
    spec.validate()?;
    let mut k = Counter::default();
    let single = || -> Result<Shape> {
        match inputs {
            [s] => Ok(*s),
            _ => Err(BlockError::InvalidSpec(format!(
                "{:?} takes one input",
                spec.kind()
            ))),
        }
    };
    let out = match *spec {
        BlockSpec::ConvBnSilu {
            c_out,
            kernel,
            stride,
            ..
        } => k.cbs(single()?, c_out, kernel, stride, 1, true)?,
        BlockSpec::DualConv { c_out, groups, .. } => k.dual(single()?, c_out, groups)?,
        BlockSpec::Bottleneck {
            c_out,
            shortcut,
            dual_groups,
            ..
        } => k.bottleneck(single()?, c_out, shortcut, dual_groups)?,
        BlockSpec::C2f {
            c_out,
            repeats,
            shortcut,
            dual_groups,
            ..
        } => {
            let c = c_out / 2;
            let y = k.cbs(single()?, 2 * c, 1, 1, 1, true)?;
            let half = Shape::new(y.n, c, y.h, y.w);
            for _ in 0..repeats {
                k.bottleneck(half, c, shortcut, dual_groups)?;
            }
            k.cbs(
                Shape::new(y.n, (2 + repeats) * c, y.h, y.w),
                c_out,
                1,
                1,
                1,
                true,
            )?
        }
        BlockSpec::Sppf {
            c_in,
            c_out,
            kernel,
        } => {
            let y = k.cbs(single()?, c_in / 2, 1, 1, 1, true)?;
            let pool = PoolParams::new(PoolKind::Max, kernel, 1, kernel / 2);
            let mut p = y;
            for _ in 0..3 {
                p = k.pool(p, pool)?;
            }
            k.cbs(Shape::new(y.n, 2 * c_in, y.h, y.w), c_out, 1, 1, 1, true)?
        }
        BlockSpec::Ema { channels, groups } => {
            let s = single()?;
            let cg = channels / groups;
            let gs = Shape::new(s.n * groups, cg, s.h, s.w);
            let xh = k.pool(gs, PoolParams::global(PoolKind::XAvg))?;
            let xw = k.pool(gs, PoolParams::global(PoolKind::YAvg))?;
            k.conv(xh, cg, 1, 1, 1)?;
            k.conv(xw, cg, 1, 1, 1)?;
            k.pointwise(xh);
            k.pointwise(xw);
            k.pointwise(gs); // gate by rows
            k.pointwise(gs); // gate by columns
            k.pointwise(gs); // group norm
            k.conv(gs, cg, 3, 1, 1)?;
            for _ in 0..2 {
                let g = k.pool(gs, PoolParams::global(PoolKind::GlobalAvg))?;
                k.pointwise(g); // softmax
                k.f.matmul += (2 * cg * gs.plane() * gs.n) as u64;
            }
            let map = Shape::new(gs.n, 1, s.h, s.w);
            k.pointwise(map); // sum
            k.pointwise(map); // sigmoid
            k.pointwise(gs);
            s
        }
        BlockSpec::Scdd { c_out, .. } => {
            let s = single()?;
            if s.h % 2 != 0 || s.w % 2 != 0 {
                return Err(TensorError::dim("scdd", format!("odd spatial size {s}")).into());
            }
            let y = k.cbs(s, c_out, 1, 1, 1, true)?;
            k.cbs(y, c_out, 3, 2, c_out, false)?
        }
        BlockSpec::DetectHead {
            channels,
            num_classes,
            reg_max,
            lightweight_cls,
        } => {
            if inputs.len() != 3 {
                return Err(BlockError::InvalidSpec(format!(
                    "head needs 3 scales, got {}",
                    inputs.len()
                )));
            }
            let (c2, c3) = head_widths(channels, num_classes, reg_max);
            let mut last = inputs[0];
            for &s in inputs {
                let b = k.cbs(s, c2, 3, 1, 1, true)?;
                let b = k.cbs(b, c2, 3, 1, 1, true)?;
                k.conv(b, 4 * reg_max, 1, 1, 1)?;
                let c = if lightweight_cls {
                    let c = k.cbs(s, s.c, 3, 1, s.c, true)?;
                    let c = k.cbs(c, c3, 1, 1, 1, true)?;
                    let c = k.cbs(c, c3, 3, 1, c3, true)?;
                    k.cbs(c, c3, 1, 1, 1, true)?
                } else {
                    let c = k.cbs(s, c3, 3, 1, 1, true)?;
                    k.cbs(c, c3, 3, 1, 1, true)?
                };
                last = k.conv(c, num_classes, 1, 1, 1)?;
            }
            last
        }
    };
    Ok((k.f, out))
}
