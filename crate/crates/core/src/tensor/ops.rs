//! Tape-free forward operations plus the backward helpers the tape uses.

use super::kernels::{self, ConvParams, PoolParams};
use super::{Element, Result, Shape, Tensor, TensorError};

pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: ConvParams,
) -> Result<Tensor<T>> {
    kernels::conv2d_forward(input, weight, bias, params)?.ensure_finite("conv2d")
}

pub fn pool<T: Element>(input: &Tensor<T>, params: PoolParams) -> Result<Tensor<T>> {
    Ok(kernels::pool_forward(input, params)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Sigmoid,
    Silu,
    /// Softmax along axis 1 (C), 2 (H) or 3 (W).
    Softmax(usize),
}

#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Element>(input: &Tensor<T>, kind: ActivationKind) -> Result<Tensor<T>> {
    match kind {
        ActivationKind::Sigmoid => Ok(input.map(sigmoid)),
        ActivationKind::Silu => Ok(input.map(|v| v * sigmoid(v))),
        ActivationKind::Softmax(axis) => softmax(input, axis),
    }
}

/// Offsets describing the lanes along `axis`: (outer count, axis len, inner stride).
fn axis_layout(s: Shape, axis: usize) -> Result<(usize, usize, usize)> {
    let d = s.dims();
    if !(1..=3).contains(&axis) {
        return Err(TensorError::dim(
            "softmax",
            format!("axis {axis} not in 1..=3"),
        ));
    }
    let outer: usize = d[..axis].iter().product();
    let inner: usize = d[axis + 1..].iter().product();
    Ok((outer, d[axis], inner))
}

pub fn softmax<T: Element>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout(input.shape(), axis)?;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
            let mut sum = 0.0f64;
            for k in 0..len {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                sum += e.as_f64();
            }
            let inv = T::from_f64(1.0 / sum);
            for k in 0..len {
                out[at(k)] = out[at(k)] * inv;
            }
        }
    }
    Tensor::from_vec(input.shape(), out)?.ensure_finite("softmax")
}

pub(crate) fn softmax_backward<T: Element>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_layout(y.shape(), axis).expect("validated on forward");
    let (yd, gd) = (y.data(), g.data());
    let mut dx = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let dot = (0..len).fold(T::zero(), |acc, k| acc + yd[at(k)] * gd[at(k)]);
            for k in 0..len {
                dx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
            }
        }
    }
    Tensor::from_vec(y.shape(), dx).expect("same shape")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormKind {
    /// Batch statistics (training mode).
    BatchTrain,
    GroupNorm(usize),
}

/// Per-slice normalization result, kept for backward.
#[derive(Clone, Debug)]
pub(crate) struct NormCache<T> {
    pub xhat: Tensor<T>,
    /// One inverse standard deviation per normalized slice.
    pub inv_std: Vec<T>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Two-pass mean/variance (biased) over each slice, 64-bit accumulation.
fn slice_stats<T: Element>(
    x: &[T],
    slices: usize,
    members: impl Fn(usize) -> Vec<std::ops::Range<usize>>,
) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; slices];
    let mut var = vec![0.0; slices];
    for s in 0..slices {
        let ranges = members(s);
        let count: usize = ranges.iter().map(|r| r.len()).sum();
        let m = ranges
            .iter()
            .flat_map(|r| x[r.clone()].iter())
            .map(|v| v.as_f64())
            .sum::<f64>()
            / count as f64;
        let v = ranges
            .iter()
            .flat_map(|r| x[r.clone()].iter())
            .map(|v| {
                let d = v.as_f64() - m;
                d * d
            })
            .sum::<f64>()
            / count as f64;
        mean[s] = m;
        var[s] = v;
    }
    (mean, var)
}

fn channel_ranges(s: Shape, c: usize) -> Vec<std::ops::Range<usize>> {
    let plane = s.plane();
    (0..s.n)
        .map(|n| s.index(n, c, 0, 0)..s.index(n, c, 0, 0) + plane)
        .collect()
}

fn group_range(s: Shape, n: usize, group: usize, cpg: usize) -> std::ops::Range<usize> {
    let start = s.index(n, group * cpg, 0, 0);
    start..start + cpg * s.plane()
}

fn check_affine<T: Element>(
    op: &'static str,
    c: usize,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
) -> Result<()> {
    if scale.numel() != c || shift.numel() != c {
        return Err(TensorError::dim(
            op,
            format!("affine params must have {c} elements"),
        ));
    }
    Ok(())
}

/// Normalizes with batch or group statistics and applies the affine map.
pub(crate) fn normalize_train<T: Element>(
    x: &Tensor<T>,
    kind: NormKind,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let s = x.shape();
    let op = match kind {
        NormKind::BatchTrain => "batch_norm",
        NormKind::GroupNorm(_) => "group_norm",
    };
    check_affine(op, s.c, scale, shift)?;
    let xd = x.data();
    let plane = s.plane();
    let (mean, var, slice_of): (Vec<f64>, Vec<f64>, Box<dyn Fn(usize, usize) -> usize>) = match kind
    {
        NormKind::BatchTrain => {
            let (m, v) = slice_stats(xd, s.c, |c| channel_ranges(s, c));
            (m, v, Box::new(|_n, c| c))
        }
        NormKind::GroupNorm(groups) => {
            if groups == 0 || !s.c.is_multiple_of(groups) {
                return Err(TensorError::dim(
                    op,
                    format!("{} channels not divisible into {groups} groups", s.c),
                ));
            }
            let cpg = s.c / groups;
            let (m, v) = slice_stats(xd, s.n * groups, |i| {
                vec![group_range(s, i / groups, i % groups, cpg)]
            });
            (m, v, Box::new(move |n, c| n * groups + c / cpg))
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for n in 0..s.n {
        for c in 0..s.c {
            let si = slice_of(n, c);
            let (m, is) = (mean[si], inv_std[si]);
            let (g, b) = (scale.data()[c], shift.data()[c]);
            let base = s.index(n, c, 0, 0);
            for i in base..base + plane {
                let h = T::from_f64((xd[i].as_f64() - m) * is);
                xhat[i] = h;
                out[i] = g * h + b;
            }
        }
    }
    let cache = NormCache {
        xhat: Tensor::from_vec(s, xhat)?,
        inv_std: inv_std.into_iter().map(T::from_f64).collect(),
        mean,
        var,
    };
    Ok((Tensor::from_vec(s, out)?.ensure_finite(op)?, cache))
}

/// Inference-mode batch norm with stored running statistics.
pub(crate) fn batch_norm_eval<T: Element>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let s = x.shape();
    check_affine("batch_norm", s.c, scale, shift)?;
    check_affine("batch_norm", s.c, running_mean, running_var)?;
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|v| T::from_f64(1.0 / (v.as_f64() + eps).sqrt()))
        .collect();
    let mut xhat = vec![T::zero(); s.numel()];
    let mut out = vec![T::zero(); s.numel()];
    let plane = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let (m, is) = (running_mean.data()[c], inv_std[c]);
            let (g, b) = (scale.data()[c], shift.data()[c]);
            let base = s.index(n, c, 0, 0);
            for i in base..base + plane {
                let h = (x.data()[i] - m) * is;
                xhat[i] = h;
                out[i] = g * h + b;
            }
        }
    }
    let cache = NormCache {
        xhat: Tensor::from_vec(s, xhat)?,
        inv_std,
        mean: running_mean.data().iter().map(|v| v.as_f64()).collect(),
        var: running_var.data().iter().map(|v| v.as_f64()).collect(),
    };
    Ok((
        Tensor::from_vec(s, out)?.ensure_finite("batch_norm")?,
        cache,
    ))
}

/// Public normalization entry point for tape-free use.
pub fn normalize<T: Element>(
    input: &Tensor<T>,
    kind: NormKind,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    Ok(normalize_train(input, kind, scale, shift, eps)?.0)
}

/// Gradients of the affine-normalize map. `stats_fixed` means the
/// statistics are constants (inference-mode batch norm).
pub(crate) fn normalize_backward<T: Element>(
    kind: NormKind,
    cache: &NormCache<T>,
    scale: &Tensor<T>,
    g: &Tensor<T>,
    stats_fixed: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = g.shape();
    let plane = s.plane();
    let xh = cache.xhat.data();
    let gd = g.data();
    let mut dscale = vec![0.0f64; s.c];
    let mut dshift = vec![0.0f64; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = s.index(n, c, 0, 0);
            for i in base..base + plane {
                dscale[c] += (gd[i] * xh[i]).as_f64();
                dshift[c] += gd[i].as_f64();
            }
        }
    }
    let mut dx = vec![T::zero(); s.numel()];
    let slices: Vec<Vec<std::ops::Range<usize>>> = match kind {
        NormKind::BatchTrain => (0..s.c).map(|c| channel_ranges(s, c)).collect(),
        NormKind::GroupNorm(groups) => {
            let cpg = s.c / groups;
            (0..s.n * groups)
                .map(|i| vec![group_range(s, i / groups, i % groups, cpg)])
                .collect()
        }
    };
    let chan = |i: usize| (i / plane) % s.c;
    for (si, ranges) in slices.iter().enumerate() {
        let is = cache.inv_std[si];
        if stats_fixed {
            for r in ranges {
                for i in r.clone() {
                    dx[i] = gd[i] * scale.data()[chan(i)] * is;
                }
            }
            continue;
        }
        let count: usize = ranges.iter().map(|r| r.len()).sum();
        let mut sum_d = 0.0f64;
        let mut sum_dx = 0.0f64;
        for r in ranges {
            for i in r.clone() {
                let d = (gd[i] * scale.data()[chan(i)]).as_f64();
                sum_d += d;
                sum_dx += d * xh[i].as_f64();
            }
        }
        let mean_d = sum_d / count as f64;
        let mean_dx = sum_dx / count as f64;
        let isf = is.as_f64();
        for r in ranges {
            for i in r.clone() {
                let d = (gd[i] * scale.data()[chan(i)]).as_f64();
                dx[i] = T::from_f64(isf * (d - mean_d - xh[i].as_f64() * mean_dx));
            }
        }
    }
    let to_t = |v: Vec<f64>| {
        Tensor::from_vec(
            Shape::new(1, s.c, 1, 1),
            v.into_iter().map(T::from_f64).collect(),
        )
        .expect("channel vector")
    };
    (
        Tensor::from_vec(s, dx).expect("same shape"),
        to_t(dscale),
        to_t(dshift),
    )
}

pub fn concat_channels<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| TensorError::dim("concat", "no inputs"))?
        .shape();
    let mut c_total = 0;
    for t in inputs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(TensorError::dim("concat", format!("{s} vs {first}")));
        }
        c_total += s.c;
    }
    let out_shape = Shape::new(first.n, c_total, first.h, first.w);
    let mut out = Vec::with_capacity(out_shape.numel());
    let plane = first.plane();
    for n in 0..first.n {
        for t in inputs {
            let len = t.shape().c * plane;
            out.extend_from_slice(&t.data()[n * len..(n + 1) * len]);
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub fn slice_channels<T: Element>(
    input: &Tensor<T>,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    if len == 0 || start + len > input.shape().c {
        return Err(TensorError::dim(
            "split",
            format!("channels {start}..{} of {}", start + len, input.shape()),
        ));
    }
    Ok(input.channels(start, len))
}

/// Splits along channels into consecutive pieces of the given sizes.
pub fn split_channels<T: Element>(input: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    if sizes.iter().sum::<usize>() != input.shape().c {
        return Err(TensorError::dim(
            "split",
            format!("sizes {sizes:?} vs {}", input.shape()),
        ));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let t = slice_channels(input, start, len);
            start += len;
            t
        })
        .collect()
}

pub fn upsample_nearest_2x<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let os = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    let mut out = vec![T::zero(); os.numel()];
    let x = input.data();
    for nc in 0..s.n * s.c {
        for y in 0..os.h {
            for xo in 0..os.w {
                out[nc * os.plane() + y * os.w + xo] = x[nc * s.plane() + (y / 2) * s.w + xo / 2];
            }
        }
    }
    Tensor::from_vec(os, out).expect("upsample shape")
}

pub(crate) fn upsample_backward<T: Element>(in_shape: Shape, g: &Tensor<T>) -> Tensor<T> {
    let s = in_shape;
    let os = g.shape();
    let mut dx = vec![T::zero(); s.numel()];
    for nc in 0..s.n * s.c {
        for y in 0..os.h {
            for xo in 0..os.w {
                let i = nc * s.plane() + (y / 2) * s.w + xo / 2;
                dx[i] = dx[i] + g.data()[nc * os.plane() + y * os.w + xo];
            }
        }
    }
    Tensor::from_vec(s, dx).expect("upsample grad shape")
}

/// Moves a factor `g` of the channel axis into the batch axis:
/// `(N, C, H, W) -> (N*g, C/g, H, W)`. Contiguous NCHW makes this a relabel.
pub fn group_fold<T: Element>(input: &Tensor<T>, g: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if g == 0 || !s.c.is_multiple_of(g) {
        return Err(TensorError::dim(
            "group_fold",
            format!("{} channels into {g} groups", s.c),
        ));
    }
    input
        .clone()
        .reshape(Shape::new(s.n * g, s.c / g, s.h, s.w))
}

pub fn group_unfold<T: Element>(input: &Tensor<T>, g: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if g == 0 || !s.n.is_multiple_of(g) {
        return Err(TensorError::dim(
            "group_unfold",
            format!("batch {} by {g} groups", s.n),
        ));
    }
    input
        .clone()
        .reshape(Shape::new(s.n / g, s.c * g, s.h, s.w))
}

pub fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let (da, db) = (a.dims(), b.dims());
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (da[i], db[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(TensorError::dim("broadcast", format!("{a} vs {b}"))),
        };
    }
    Ok(Shape::from_dims(out))
}

fn bstrides(s: Shape) -> [usize; 4] {
    let d = s.dims();
    let full = [d[1] * d[2] * d[3], d[2] * d[3], d[3], 1];
    let mut st = [0; 4];
    for i in 0..4 {
        st[i] = if d[i] == 1 { 0 } else { full[i] };
    }
    st
}

/// Elementwise binary op with size-1 broadcasting.
pub fn broadcast_binary<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let os = broadcast_shape(a.shape(), b.shape())?;
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::from_vec(os, data);
    }
    let (sa, sb) = (bstrides(a.shape()), bstrides(b.shape()));
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..os.n {
        for c in 0..os.c {
            for h in 0..os.h {
                let ra = n * sa[0] + c * sa[1] + h * sa[2];
                let rb = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..os.w {
                    out.push(f(a.data()[ra + w * sa[3]], b.data()[rb + w * sb[3]]));
                }
            }
        }
    }
    Tensor::from_vec(os, out)
}

/// Sums a broadcast-shaped gradient back down to `target`.
pub(crate) fn reduce_to<T: Element>(g: &Tensor<T>, target: Shape) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let os = g.shape();
    let st = bstrides(target);
    let mut acc = vec![0.0f64; target.numel()];
    let mut i = 0;
    for n in 0..os.n {
        for c in 0..os.c {
            for h in 0..os.h {
                let r = n * st[0] + c * st[1] + h * st[2];
                for w in 0..os.w {
                    acc[r + w * st[3]] += g.data()[i].as_f64();
                    i += 1;
                }
            }
        }
    }
    Tensor::from_vec(target, acc.into_iter().map(T::from_f64).collect()).expect("reduce shape")
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binary(a, b, |x, y| x + y)?.ensure_finite("add")
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binary(a, b, |x, y| x * y)?.ensure_finite("mul")
}

/// Batched matrix product over the spatial axes: `(N,C,M,K) x (N,C,K,P) -> (N,C,M,P)`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.c != sb.c || sa.w != sb.h {
        return Err(TensorError::dim("matmul", format!("{sa} x {sb}")));
    }
    let (m, k, p) = (sa.h, sa.w, sb.w);
    let os = Shape::new(sa.n, sa.c, m, p);
    let mut out = vec![T::zero(); os.numel()];
    for bi in 0..sa.n * sa.c {
        T::gemm(
            m,
            k,
            p,
            &a.data()[bi * m * k..(bi + 1) * m * k],
            false,
            &b.data()[bi * k * p..(bi + 1) * k * p],
            false,
            &mut out[bi * m * p..(bi + 1) * m * p],
            false,
        );
    }
    Tensor::from_vec(os, out)?.ensure_finite("matmul")
}

pub(crate) fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (sa, sb) = (a.shape(), b.shape());
    let (m, k, p) = (sa.h, sa.w, sb.w);
    let mut da = vec![T::zero(); sa.numel()];
    let mut db = vec![T::zero(); sb.numel()];
    for bi in 0..sa.n * sa.c {
        let gs = &g.data()[bi * m * p..(bi + 1) * m * p];
        // dA = G · B^T ; dB = A^T · G
        T::gemm(
            m,
            p,
            k,
            gs,
            false,
            &b.data()[bi * k * p..(bi + 1) * k * p],
            true,
            &mut da[bi * m * k..(bi + 1) * m * k],
            false,
        );
        T::gemm(
            k,
            m,
            p,
            &a.data()[bi * m * k..(bi + 1) * m * k],
            true,
            gs,
            false,
            &mut db[bi * k * p..(bi + 1) * k * p],
            false,
        );
    }
    (
        Tensor::from_vec(sa, da).expect("matmul grad"),
        Tensor::from_vec(sb, db).expect("matmul grad"),
    )
}
