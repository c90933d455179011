//! Forward and backward kernels on raw tensors. No tape involvement.
//!
//! Convolution is cross-correlation with zero padding. Grouped
//! convolution splits input and output channels into `groups` equal
//! blocks; depthwise (`groups == cin == cout`) takes a direct loop,
//! everything else goes through im2col and a gemm.

use rayon::prelude::*;

use super::{Element, Result, Shape, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvParams {
            stride,
            padding,
            groups,
        }
    }
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams::new(1, 0, 1)
    }
}

pub fn conv_out_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl ConvGeom {
    fn cig(&self) -> usize {
        self.cin / self.groups
    }
    fn cog(&self) -> usize {
        self.cout / self.groups
    }
    fn k(&self) -> usize {
        self.cig() * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
    fn is_depthwise(&self) -> bool {
        self.cig() == 1 && self.cog() == 1
    }
    fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.cout, self.ho, self.wo)
    }
}

fn conv_geom(x: Shape, w: Shape, bias: Option<Shape>, p: ConvParams) -> Result<ConvGeom> {
    let op = "conv2d";
    if p.groups == 0 || p.stride == 0 {
        return Err(TensorError::dim(op, "groups and stride must be positive"));
    }
    if !x.c.is_multiple_of(p.groups) || !w.n.is_multiple_of(p.groups) {
        return Err(TensorError::dim(
            op,
            format!(
                "channels {}->{} not divisible by groups {}",
                x.c, w.n, p.groups
            ),
        ));
    }
    if w.c * p.groups != x.c {
        return Err(TensorError::dim(
            op,
            format!(
                "weight {w} expects {} input channels, got {}",
                w.c * p.groups,
                x.c
            ),
        ));
    }
    if let Some(b) = bias {
        if b.numel() != w.n {
            return Err(TensorError::dim(
                op,
                format!("bias {b} for {} outputs", w.n),
            ));
        }
    }
    let ho = conv_out_dim(x.h, w.h, p.stride, p.padding);
    let wo = conv_out_dim(x.w, w.w, p.stride, p.padding);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(TensorError::dim(
            op,
            format!("kernel {w} larger than padded input {x}"),
        ));
    };
    Ok(ConvGeom {
        n: x.n,
        cin: x.c,
        h: x.h,
        w: x.w,
        cout: w.n,
        kh: w.h,
        kw: w.w,
        ho,
        wo,
        stride: p.stride,
        pad: p.padding,
        groups: p.groups,
    })
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`.
#[inline]
fn valid_range(out: usize, size: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < size
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if size + pad > k {
        ((size + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (h, w, ho, wo, s, pad) = (g.h, g.w, g.ho, g.wo, g.stride, g.pad);
    let p = ho * wo;
    for ci in 0..g.cig() {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ho, h, ky, s, pad);
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                let (ox_lo, ox_hi) = valid_range(wo, w, kx, s, pad);
                for oy in 0..ho {
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if oy < oy_lo || oy >= oy_hi || ox_lo >= ox_hi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let iy = oy * s + ky - pad;
                    let src = &plane[iy * w..(iy + 1) * w];
                    drow[..ox_lo].fill(T::zero());
                    drow[ox_hi..].fill(T::zero());
                    if s == 1 {
                        let ix0 = ox_lo + kx - pad;
                        drow[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            drow[ox] = src[ox * s + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (h, w, ho, wo, s, pad) = (g.h, g.w, g.ho, g.wo, g.stride, g.pad);
    let p = ho * wo;
    for ci in 0..g.cig() {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ho, h, ky, s, pad);
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                let (ox_lo, ox_hi) = valid_range(wo, w, kx, s, pad);
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - pad;
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    let drow = &mut plane[iy * w..(iy + 1) * w];
                    for ox in ox_lo..ox_hi {
                        let ix = ox * s + kx - pad;
                        drow[ix] = drow[ix] + srow[ox];
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Element>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let (h, wd, ho, wo, s, pad) = (g.h, g.w, g.ho, g.wo, g.stride, g.pad);
    for c in 0..g.cout {
        let plane = &x[c * h * wd..(c + 1) * h * wd];
        let ker = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
        let dst = &mut out[c * ho * wo..(c + 1) * ho * wo];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ho, h, ky, s, pad);
            for kx in 0..g.kw {
                let kv = ker[ky * g.kw + kx];
                let (ox_lo, ox_hi) = valid_range(wo, wd, kx, s, pad);
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - pad;
                    for ox in ox_lo..ox_hi {
                        let ix = ox * s + kx - pad;
                        dst[oy * wo + ox] = dst[oy * wo + ox] + kv * plane[iy * wd + ix];
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Element>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: &mut [T],
) {
    let (h, wd, ho, wo, s, pad) = (g.h, g.w, g.ho, g.wo, g.stride, g.pad);
    let mut dx = dx;
    for c in 0..g.cout {
        let plane = &x[c * h * wd..(c + 1) * h * wd];
        let go = &gout[c * ho * wo..(c + 1) * ho * wo];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ho, h, ky, s, pad);
            for kx in 0..g.kw {
                let ki = c * g.kh * g.kw + ky * g.kw + kx;
                let kv = w[ki];
                let (ox_lo, ox_hi) = valid_range(wo, wd, kx, s, pad);
                let mut acc = T::zero();
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - pad;
                    for ox in ox_lo..ox_hi {
                        let ix = ox * s + kx - pad;
                        let gv = go[oy * wo + ox];
                        acc = acc + gv * plane[iy * wd + ix];
                        if let Some(dx) = dx.as_deref_mut() {
                            let di = c * h * wd + iy * wd + ix;
                            dx[di] = dx[di] + gv * kv;
                        }
                    }
                }
                dw[ki] = dw[ki] + acc;
            }
        }
    }
}

/// Forward convolution of one sample (`x`: cin×h×w) into `out` (cout×ho×wo).
fn conv_sample<T: Element>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T], col: &mut Vec<T>) {
    if g.is_depthwise() {
        out.fill(T::zero());
        depthwise_forward(x, w, g, out);
        return;
    }
    let (k, p, cig, cog) = (g.k(), g.p(), g.cig(), g.cog());
    for grp in 0..g.groups {
        let xg = &x[grp * cig * g.h * g.w..(grp + 1) * cig * g.h * g.w];
        let wg = &w[grp * cog * k..(grp + 1) * cog * k];
        let og = &mut out[grp * cog * p..(grp + 1) * cog * p];
        if g.is_pointwise() {
            T::gemm(cog, k, p, wg, false, xg, false, og, false);
        } else {
            col.resize(k * p, T::zero());
            im2col(xg, g, col);
            T::gemm(cog, k, p, wg, false, col, false, og, false);
        }
    }
}

pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: ConvParams,
) -> Result<Tensor<T>> {
    let g = conv_geom(x.shape(), w.shape(), bias.map(|b| b.shape()), p)?;
    let out_shape = g.out_shape();
    let mut out = vec![T::zero(); out_shape.numel()];
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.p();
    let wd = w.data();
    out.par_chunks_mut(out_len.max(1))
        .zip(x.data().par_chunks(in_len.max(1)))
        .for_each_init(Vec::new, |col, (o, xs)| conv_sample(xs, wd, &g, o, col));
    if let Some(b) = bias {
        let plane = g.p();
        for chunk in out.chunks_mut(out_len.max(1)) {
            for (c, &bv) in b.data().iter().enumerate() {
                for v in &mut chunk[c * plane..(c + 1) * plane] {
                    *v = *v + bv;
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    p: ConvParams,
    need_input: bool,
    need_bias: bool,
) -> Result<ConvGrads<T>> {
    let g = conv_geom(x.shape(), w.shape(), None, p)?;
    if grad_out.shape() != g.out_shape() {
        return Err(TensorError::dim(
            "conv2d_backward",
            "gradient shape mismatch",
        ));
    }
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.p();
    let wlen = w.numel();
    let (k, pp, cig, cog) = (g.k(), g.p(), g.cig(), g.cog());
    let wd = w.data();

    // per-sample partials, reduced in sample order below
    let partials: Vec<(Vec<T>, Option<Vec<T>>)> = x
        .data()
        .par_chunks(in_len.max(1))
        .zip(grad_out.data().par_chunks(out_len.max(1)))
        .map(|(xs, go)| {
            let mut dw = vec![T::zero(); wlen];
            let mut dx = need_input.then(|| vec![T::zero(); in_len]);
            if g.is_depthwise() {
                depthwise_backward(xs, wd, go, &g, dx.as_deref_mut(), &mut dw);
                return (dw, dx);
            }
            let mut col = Vec::new();
            let mut dcol = Vec::new();
            for grp in 0..g.groups {
                let xg = &xs[grp * cig * g.h * g.w..(grp + 1) * cig * g.h * g.w];
                let wg = &wd[grp * cog * k..(grp + 1) * cog * k];
                let gog = &go[grp * cog * pp..(grp + 1) * cog * pp];
                let dwg = &mut dw[grp * cog * k..(grp + 1) * cog * k];
                if g.is_pointwise() {
                    T::gemm(cog, pp, k, gog, false, xg, true, dwg, false);
                    if let Some(dx) = dx.as_deref_mut() {
                        let dxg = &mut dx[grp * cig * g.h * g.w..(grp + 1) * cig * g.h * g.w];
                        T::gemm(k, cog, pp, wg, true, gog, false, dxg, false);
                    }
                } else {
                    col.resize(k * pp, T::zero());
                    im2col(xg, &g, &mut col);
                    T::gemm(cog, pp, k, gog, false, &col, true, dwg, false);
                    if let Some(dx) = dx.as_deref_mut() {
                        dcol.resize(k * pp, T::zero());
                        T::gemm(k, cog, pp, wg, true, gog, false, &mut dcol, false);
                        let dxg = &mut dx[grp * cig * g.h * g.w..(grp + 1) * cig * g.h * g.w];
                        col2im(&dcol, &g, dxg);
                    }
                }
            }
            (dw, dx)
        })
        .collect();

    let mut dw = vec![T::zero(); wlen];
    let mut dx = need_input.then(|| Vec::with_capacity(x.numel()));
    for (pdw, pdx) in partials {
        for (a, b) in dw.iter_mut().zip(pdw) {
            *a = *a + b;
        }
        if let (Some(dx), Some(pdx)) = (dx.as_mut(), pdx) {
            dx.extend(pdx);
        }
    }
    let bias = need_bias.then(|| {
        let mut db = vec![0.0f64; g.cout];
        for chunk in grad_out.data().chunks(out_len.max(1)) {
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += chunk[c * pp..(c + 1) * pp]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum::<f64>();
            }
        }
        Tensor::from_vec(
            Shape::new(1, g.cout, 1, 1),
            db.into_iter().map(T::from_f64).collect(),
        )
    });
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::from_vec(x.shape(), d)).transpose()?,
        weight: Tensor::from_vec(w.shape(), dw)?,
        bias: bias.transpose()?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Max,
    Avg,
    /// Mean over the whole plane: `(N,C,1,1)`.
    GlobalAvg,
    /// Mean over the width axis: `(N,C,H,1)`.
    XAvg,
    /// Mean over the height axis: `(N,C,1,W)`.
    YAvg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PoolParams {
    pub kind: PoolKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolParams {
    pub const fn new(kind: PoolKind, kernel: usize, stride: usize, padding: usize) -> Self {
        PoolParams {
            kind,
            kernel,
            stride,
            padding,
        }
    }

    pub const fn global(kind: PoolKind) -> Self {
        PoolParams {
            kind,
            kernel: 0,
            stride: 1,
            padding: 0,
        }
    }
}

pub fn pool_out_shape(s: Shape, p: PoolParams) -> Result<Shape> {
    match p.kind {
        PoolKind::GlobalAvg => Ok(Shape::new(s.n, s.c, 1, 1)),
        PoolKind::XAvg => Ok(Shape::new(s.n, s.c, s.h, 1)),
        PoolKind::YAvg => Ok(Shape::new(s.n, s.c, 1, s.w)),
        PoolKind::Max | PoolKind::Avg => {
            if p.padding * 2 > p.kernel {
                return Err(TensorError::dim("pool", "padding exceeds half the kernel"));
            }
            let ho = conv_out_dim(s.h, p.kernel, p.stride, p.padding);
            let wo = conv_out_dim(s.w, p.kernel, p.stride, p.padding);
            match (ho, wo) {
                (Some(ho), Some(wo)) => Ok(Shape::new(s.n, s.c, ho, wo)),
                _ => Err(TensorError::dim(
                    "pool",
                    format!("kernel {} larger than padded input {s}", p.kernel),
                )),
            }
        }
    }
}

/// Pooling forward. For max pooling also returns the in-plane argmax of
/// every output element; ties resolve to the first maximum in scan order.
pub fn pool_forward<T: Element>(x: &Tensor<T>, p: PoolParams) -> Result<(Tensor<T>, Vec<u32>)> {
    let s = x.shape();
    let os = pool_out_shape(s, p)?;
    let plane = s.plane();
    let oplane = os.plane();
    let mut out = vec![T::zero(); os.numel()];
    let mut arg = Vec::new();
    let xd = x.data();
    match p.kind {
        PoolKind::GlobalAvg => {
            let inv = 1.0 / plane as f64;
            for (i, o) in out.iter_mut().enumerate() {
                let sum: f64 = xd[i * plane..(i + 1) * plane]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum();
                *o = T::from_f64(sum * inv);
            }
        }
        PoolKind::XAvg => {
            let inv = 1.0 / s.w as f64;
            for nc in 0..s.n * s.c {
                for y in 0..s.h {
                    let row = &xd[nc * plane + y * s.w..nc * plane + (y + 1) * s.w];
                    let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
                    out[nc * s.h + y] = T::from_f64(sum * inv);
                }
            }
        }
        PoolKind::YAvg => {
            let inv = 1.0 / s.h as f64;
            let mut acc = vec![0.0f64; s.w];
            for nc in 0..s.n * s.c {
                acc.fill(0.0);
                for y in 0..s.h {
                    for (a, v) in acc.iter_mut().zip(&xd[nc * plane + y * s.w..]) {
                        *a += v.as_f64();
                    }
                }
                for (o, a) in out[nc * s.w..(nc + 1) * s.w].iter_mut().zip(&acc) {
                    *o = T::from_f64(a * inv);
                }
            }
        }
        PoolKind::Max | PoolKind::Avg => {
            let is_max = p.kind == PoolKind::Max;
            if is_max {
                arg = vec![0u32; os.numel()];
            }
            let inv = 1.0 / (p.kernel * p.kernel) as f64;
            for nc in 0..s.n * s.c {
                let src = &xd[nc * plane..(nc + 1) * plane];
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let mut best = T::neg_infinity();
                        let mut best_i = 0u32;
                        let mut sum = 0.0f64;
                        for ky in 0..p.kernel {
                            let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            for kx in 0..p.kernel {
                                let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                if ix < 0 || ix >= s.w as isize {
                                    continue;
                                }
                                let idx = iy as usize * s.w + ix as usize;
                                let v = src[idx];
                                if is_max {
                                    if v > best {
                                        best = v;
                                        best_i = idx as u32;
                                    }
                                } else {
                                    sum += v.as_f64();
                                }
                            }
                        }
                        let oi = nc * oplane + oy * os.w + ox;
                        if is_max {
                            out[oi] = best;
                            arg[oi] = best_i;
                        } else {
                            out[oi] = T::from_f64(sum * inv);
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::from_vec(os, out)?, arg))
}

pub fn pool_backward<T: Element>(
    in_shape: Shape,
    grad_out: &Tensor<T>,
    p: PoolParams,
    argmax: &[u32],
) -> Tensor<T> {
    let s = in_shape;
    let os = grad_out.shape();
    let plane = s.plane();
    let oplane = os.plane();
    let g = grad_out.data();
    let mut dx = vec![T::zero(); s.numel()];
    match p.kind {
        PoolKind::GlobalAvg => {
            let inv = T::from_f64(1.0 / plane as f64);
            for (i, &gv) in g.iter().enumerate() {
                dx[i * plane..(i + 1) * plane].fill(gv * inv);
            }
        }
        PoolKind::XAvg => {
            let inv = T::from_f64(1.0 / s.w as f64);
            for nc in 0..s.n * s.c {
                for y in 0..s.h {
                    let gv = g[nc * s.h + y] * inv;
                    dx[nc * plane + y * s.w..nc * plane + (y + 1) * s.w].fill(gv);
                }
            }
        }
        PoolKind::YAvg => {
            let inv = T::from_f64(1.0 / s.h as f64);
            for nc in 0..s.n * s.c {
                for y in 0..s.h {
                    for x in 0..s.w {
                        dx[nc * plane + y * s.w + x] = g[nc * s.w + x] * inv;
                    }
                }
            }
        }
        PoolKind::Max => {
            for nc in 0..s.n * s.c {
                for o in 0..oplane {
                    let i = nc * plane + argmax[nc * oplane + o] as usize;
                    dx[i] = dx[i] + g[nc * oplane + o];
                }
            }
        }
        PoolKind::Avg => {
            let inv = T::from_f64(1.0 / (p.kernel * p.kernel) as f64);
            for nc in 0..s.n * s.c {
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let gv = g[nc * oplane + oy * os.w + ox] * inv;
                        for ky in 0..p.kernel {
                            let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            for kx in 0..p.kernel {
                                let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                if ix < 0 || ix >= s.w as isize {
                                    continue;
                                }
                                let i = nc * plane + iy as usize * s.w + ix as usize;
                                dx[i] = dx[i] + gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(s, dx).expect("pool gradient shape")
}
