//! Reference implementations written independently of the library kernels.
//! Plain loops over `f64` slices; slow and obvious on purpose.
#![allow(dead_code)]

/// Six-nested-loop grouped cross-correlation with zero padding.
/// `x`: n×cin×h×w, `w`: cout×(cin/groups)×kh×kw.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_naive(
    x: &[f64],
    (n, cin, h, wd): (usize, usize, usize, usize),
    w: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, (usize, usize, usize, usize)) {
    let cig = cin / groups;
    let cog = cout / groups;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for co in 0..cout {
            let g = co / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bs| bs[co]);
                    for ci in 0..cig {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi =
                                    ((b * cin + g * cig + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((co * cig + ci) * kh + ky) * kw + kx;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    out[((b * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, (n, cout, ho, wo))
}

/// Expands a grouped weight into the equivalent dense weight with zeros
/// off the diagonal blocks.
pub fn block_diagonal_weight(
    w: &[f64],
    (cout, cig, kh, kw): (usize, usize, usize, usize),
    groups: usize,
) -> Vec<f64> {
    let cin = cig * groups;
    let cog = cout / groups;
    let mut dense = vec![0.0; cout * cin * kh * kw];
    for co in 0..cout {
        let g = co / cog;
        for ci in 0..cig {
            for k in 0..kh * kw {
                dense[(co * cin + g * cig + ci) * kh * kw + k] = w[(co * cig + ci) * kh * kw + k];
            }
        }
    }
    dense
}

/// Max pooling by direct window scan (padding never wins the max).
pub fn max_pool_naive(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![f64::NEG_INFINITY; n * c * ho * wo];
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            let v = x[p * h * w + iy as usize * w + ix as usize];
                            let o = &mut out[p * ho * wo + oy * wo + ox];
                            *o = o.max(v);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Training-mode batch norm with two-pass biased variance, per channel.
pub fn batch_norm_naive(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    scale: &[f64],
    shift: &[f64],
    eps: f64,
) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let idx = |s: usize, i: usize| (s * c + ch) * plane + i;
        let count = (n * plane) as f64;
        let mut mean = 0.0;
        for s in 0..n {
            for i in 0..plane {
                mean += x[idx(s, i)];
            }
        }
        mean /= count;
        let mut var = 0.0;
        for s in 0..n {
            for i in 0..plane {
                var += (x[idx(s, i)] - mean).powi(2);
            }
        }
        var /= count;
        for s in 0..n {
            for i in 0..plane {
                out[idx(s, i)] = scale[ch] * (x[idx(s, i)] - mean) / (var + eps).sqrt() + shift[ch];
            }
        }
    }
    out
}

pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Intersection over union from explicit overlap corners.
pub fn iou_naive(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix1 = if a[0] > b[0] { a[0] } else { b[0] };
    let iy1 = if a[1] > b[1] { a[1] } else { b[1] };
    let ix2 = if a[2] < b[2] { a[2] } else { b[2] };
    let iy2 = if a[3] < b[3] { a[3] } else { b[3] };
    let inter = if ix2 > ix1 && iy2 > iy1 {
        (ix2 - ix1) * (iy2 - iy1)
    } else {
        0.0
    };
    let area = |r: [f64; 4]| ((r[2] - r[0]).max(0.0)) * ((r[3] - r[1]).max(0.0));
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Suppression by repeated selection of the best remaining box.
/// Items are `(score, class, [x1, y1, x2, y2])`; returns kept indices in
/// selection order.
pub fn nms_naive(items: &[(f64, usize, [f64; 4])], thresh: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; items.len()];
    let mut kept = Vec::new();
    let better = |i: usize, j: usize| {
        let (a, b) = (&items[i], &items[j]);
        if a.0 != b.0 {
            return a.0 > b.0;
        }
        if a.1 != b.1 {
            return a.1 < b.1;
        }
        for k in 0..4 {
            if a.2[k] != b.2[k] {
                return a.2[k] < b.2[k];
            }
        }
        false
    };
    loop {
        let mut best: Option<usize> = None;
        for i in 0..items.len() {
            if alive[i] && best.is_none_or(|b| better(i, b)) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for i in 0..items.len() {
            if alive[i] && items[i].1 == items[b].1 && iou_naive(items[i].2, items[b].2) > thresh {
                alive[i] = false;
            }
        }
    }
    kept
}

/// Matching by a full scan of every ground truth per detection.
/// Detections are `(image, class, box)` already in score order; ground
/// truths are `(image, class, box)`.
pub fn match_naive(
    dets: &[(String, usize, [f64; 4])],
    gts: &[(String, usize, [f64; 4])],
    thresh: f64,
) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::new();
    for d in dets {
        let mut best_iou = -1.0;
        let mut best_j = usize::MAX;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.0 != d.0 || g.1 != d.1 {
                continue;
            }
            let v = iou_naive(d.2, g.2);
            if v >= thresh && v > best_iou {
                best_iou = v;
                best_j = j;
            }
        }
        if best_j != usize::MAX {
            taken[best_j] = true;
        }
        out.push(best_j != usize::MAX);
    }
    out
}

/// Integrates the interpolated precision curve by evaluating it at the
/// midpoint of every recall step.
pub fn ap_naive(flags: &[bool], total_gt: usize) -> f64 {
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        points.push((tp as f64 / total_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut area = 0.0;
    for k in 0..total_gt {
        let r = (k as f64 + 0.5) / total_gt as f64;
        let p = points
            .iter()
            .filter(|(rr, _)| *rr >= r)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        area += p / total_gt as f64;
    }
    area
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Per-cell assignment by exhaustive rank counting. A target claims a
/// cell when fewer than `k` contained cells of the same scale (`level`)
/// are strictly nearer (distance, then index); with no contained cell at
/// all, only the overall nearest cell. Targets are `[x1, y1, x2, y2]`.
pub fn assign_naive(
    targets: &[[f64; 4]],
    centers: &[(f64, f64)],
    level: &[usize],
    k: usize,
) -> Vec<Option<usize>> {
    let inside = |t: &[f64; 4], c: (f64, f64)| c.0 > t[0] && c.0 < t[2] && c.1 > t[1] && c.1 < t[3];
    let area = |t: &[f64; 4]| (t[2] - t[0]) * (t[3] - t[1]);
    let mut out = vec![None; centers.len()];
    for (ci, &c) in centers.iter().enumerate() {
        let mut best: Option<usize> = None;
        for (ti, t) in targets.iter().enumerate() {
            let (gx, gy) = ((t[0] + t[2]) / 2.0, (t[1] + t[3]) / 2.0);
            let d = |p: (f64, f64)| (p.0 - gx) * (p.0 - gx) + (p.1 - gy) * (p.1 - gy);
            let nearer = |other: usize| {
                let (a, b) = (d(centers[other]), d(c));
                a < b || (a == b && other < ci)
            };
            let any_inside = centers.iter().any(|&p| inside(t, p));
            let claims = if any_inside {
                inside(t, c)
                    && (0..centers.len())
                        .filter(|&o| level[o] == level[ci] && inside(t, centers[o]) && nearer(o))
                        .count()
                        < k
            } else {
                !(0..centers.len()).any(nearer)
            };
            if claims && best.is_none_or(|b| area(t) < area(&targets[b])) {
                best = Some(ti);
            }
        }
        out[ci] = best;
    }
    out
}
