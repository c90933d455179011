use std::ops::{Add, Div, Mul, Sub};

use serde::{Deserialize, Serialize};

use super::assign::{assign, Grid, Target};
use super::{Result, TrainError};
use crate::nn::ScaleOutput;
use crate::tensor::{CustomOp, Element, Shape, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub box_: f64,
    pub dfl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 0.5,
            box_: 7.5,
            dfl: 1.5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub box_: f64,
    pub dfl: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(cls: f64, box_: f64, dfl: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            cls,
            box_,
            dfl,
            total: w.cls * cls + w.box_ * box_ + w.dfl * dfl,
        }
    }
}

const EPS: f64 = 1e-7;

/// Value with partial derivatives against the four predicted side
/// distances.
#[derive(Clone, Copy, Debug)]
struct Dual {
    v: f64,
    d: [f64; 4],
}

impl Dual {
    fn c(v: f64) -> Self {
        Dual { v, d: [0.0; 4] }
    }

    fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Dual { v, d }
    }

    fn scale(self, k: f64) -> Self {
        Dual {
            v: self.v * k,
            d: self.d.map(|x| x * k),
        }
    }

    fn atan(self) -> Self {
        let k = 1.0 / (1.0 + self.v * self.v);
        Dual {
            v: self.v.atan(),
            d: self.d.map(|x| x * k),
        }
    }

    fn max(self, o: Self) -> Self {
        if self.v >= o.v {
            self
        } else {
            o
        }
    }

    fn min(self, o: Self) -> Self {
        if self.v <= o.v {
            self
        } else {
            o
        }
    }

    fn relu(self) -> Self {
        self.max(Dual::c(0.0))
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: std::array::from_fn(|i| self.d[i] + o.d[i]),
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: std::array::from_fn(|i| self.d[i] - o.d[i]),
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]),
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        Dual {
            v: self.v * inv,
            d: std::array::from_fn(|i| (self.d[i] - self.v * inv * o.d[i]) * inv),
        }
    }
}

/// `1 - CIoU` between the box predicted as side distances `ltrb` from
/// `anchor` and the target box; both in grid units. The aspect weight is
/// differentiated too, so the gradient is exact.
fn ciou_loss(anchor: (f64, f64), ltrb: [f64; 4], target: [f64; 4]) -> Dual {
    let [l, t, r, b] = std::array::from_fn(|i| Dual::var(ltrb[i], i));
    let (ax, ay) = (Dual::c(anchor.0), Dual::c(anchor.1));
    let (px1, py1, px2, py2) = (ax - l, ay - t, ax + r, ay + b);
    let [tx1, ty1, tx2, ty2] = target.map(Dual::c);
    let (w1, h1) = (px2 - px1, py2 - py1 + Dual::c(EPS));
    let (w2, h2) = (tx2 - tx1, ty2 - ty1 + Dual::c(EPS));
    let inter = (px2.min(tx2) - px1.max(tx1)).relu() * (py2.min(ty2) - py1.max(ty1)).relu();
    let union = w1 * h1 + w2 * h2 - inter + Dual::c(EPS);
    let iou = inter / union;
    let cw = px2.max(tx2) - px1.min(tx1);
    let ch = py2.max(ty2) - py1.min(ty1);
    let c2 = cw * cw + ch * ch + Dual::c(EPS);
    let dx = tx1 + tx2 - px1 - px2;
    let dy = ty1 + ty2 - py1 - py2;
    let rho2 = (dx * dx + dy * dy).scale(0.25);
    let da = (w2 / h2).atan() - (w1 / h1).atan();
    let v = (da * da).scale(4.0 / (std::f64::consts::PI * std::f64::consts::PI));
    let alpha = v / (v - iou + Dual::c(1.0 + EPS));
    Dual::c(1.0) - (iou - (rho2 / c2 + v * alpha))
}

fn bce_with_logits(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients were computed with the forward pass; backward only scales them.
struct FusedLoss<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Element> CustomOp<T> for FusedLoss<T> {
    fn name(&self) -> &'static str {
        "detection_loss"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let k = grad_output.item();
        self.grads.iter().map(|g| Some(g.map(|v| v * k))).collect()
    }
}

/// Per-image targets plus the positive count over the batch.
pub struct Assignment {
    pub owners: Vec<Vec<Option<usize>>>,
    pub num_pos: usize,
}

pub fn assign_batch(targets: &[Vec<Target>], grids: &[Grid]) -> Assignment {
    let owners: Vec<Vec<Option<usize>>> = targets.iter().map(|t| assign(t, grids)).collect();
    let num_pos = owners.iter().flatten().filter(|o| o.is_some()).count();
    Assignment { owners, num_pos }
}

/// Classification BCE over every cell, CIoU and DFL over positive cells,
/// each divided by the positive count (at least 1). Records one fused
/// node on the tape and returns it with the unweighted terms.
pub fn detection_loss<T: Element>(
    tape: &mut Tape<T>,
    outputs: &[ScaleOutput],
    targets: &[Vec<Target>],
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let (n, nc) = {
        let s = tape.value(outputs[0].cls).shape();
        (s.n, s.c)
    };
    if targets.len() != n {
        return Err(TrainError::Shape(format!(
            "{} target lists for batch of {n}",
            targets.len()
        )));
    }
    // The first map is at stride 8.
    let image_w = tape.value(outputs[0].cls).shape().w * 8;
    let mut grids = Vec::with_capacity(outputs.len());
    for o in outputs {
        let (cs, bs) = (tape.value(o.cls).shape(), tape.value(o.box_dist).shape());
        if cs.n != n || cs.c != nc || (bs.n, bs.h, bs.w) != (n, cs.h, cs.w) || bs.c % 4 != 0 {
            return Err(TrainError::Shape(format!("head maps {cs} / {bs}")));
        }
        grids.push(Grid {
            stride: image_w / cs.w,
            h: cs.h,
            w: cs.w,
        });
    }
    let reg_max = tape.value(outputs[0].box_dist).shape().c / 4;
    let assignment = assign_batch(targets, &grids);
    let norm = assignment.num_pos.max(1) as f64;

    let mut grads: Vec<Tensor<T>> = Vec::with_capacity(2 * outputs.len());
    let (mut cls_sum, mut box_sum, mut dfl_sum) = (0.0, 0.0, 0.0);
    let mut cell_base = 0;
    for (o, g) in outputs.iter().zip(&grids) {
        let cls = tape.value(o.cls);
        let dist = tape.value(o.box_dist);
        let plane = g.cells();
        let mut gcls = vec![0.0f64; cls.numel()];
        let mut gbox = vec![0.0f64; dist.numel()];
        let s = g.stride as f64;
        for b in 0..n {
            for cell in 0..plane {
                let owner = assignment.owners[b][cell_base + cell].map(|ti| &targets[b][ti]);
                let want = owner.map(|t| t.class_id);
                for c in 0..nc {
                    let idx = (b * nc + c) * plane + cell;
                    let x = cls.data()[idx].as_f64();
                    let y = if want == Some(c) { 1.0 } else { 0.0 };
                    cls_sum += bce_with_logits(x, y);
                    gcls[idx] = (sigmoid(x) - y) / norm;
                }
                let Some(t) = owner else { continue };
                let (cx, cy) = g.center(cell);
                let anchor = (cx / s, cy / s);
                let tb = [t.bbox.x1 / s, t.bbox.y1 / s, t.bbox.x2 / s, t.bbox.y2 / s];
                let sides = [
                    anchor.0 - tb[0],
                    anchor.1 - tb[1],
                    tb[2] - anchor.0,
                    tb[3] - anchor.1,
                ];
                let mut probs = vec![vec![0.0f64; reg_max]; 4];
                let mut expect = [0.0f64; 4];
                for side in 0..4 {
                    let at = |k: usize| ((b * 4 * reg_max) + side * reg_max + k) * plane + cell;
                    let logits: Vec<f64> =
                        (0..reg_max).map(|k| dist.data()[at(k)].as_f64()).collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                    let logz = z.ln() + m;
                    let p = &mut probs[side];
                    for k in 0..reg_max {
                        p[k] = (logits[k] - logz).exp();
                        expect[side] += k as f64 * p[k];
                    }
                    let tgt = sides[side].clamp(0.0, reg_max as f64 - 1.01);
                    let lo = tgt.floor() as usize;
                    let (wl, wr) = (lo as f64 + 1.0 - tgt, tgt - lo as f64);
                    dfl_sum += -(wl * (logits[lo] - logz) + wr * (logits[lo + 1] - logz)) / 4.0;
                    for k in 0..reg_max {
                        let target = if k == lo {
                            wl
                        } else if k == lo + 1 {
                            wr
                        } else {
                            0.0
                        };
                        gbox[at(k)] += weights.dfl * (p[k] - target) / 4.0 / norm;
                    }
                }
                let l = ciou_loss(anchor, expect, tb);
                box_sum += l.v;
                for side in 0..4 {
                    let at = |k: usize| ((b * 4 * reg_max) + side * reg_max + k) * plane + cell;
                    for k in 0..reg_max {
                        let p = probs[side][k];
                        gbox[at(k)] +=
                            weights.box_ * l.d[side] * p * (k as f64 - expect[side]) / norm;
                    }
                }
            }
        }
        let cls_shape: Shape = cls.shape();
        let box_shape: Shape = dist.shape();
        let wc = weights.cls;
        grads.push(Tensor::from_vec(
            cls_shape,
            gcls.into_iter().map(|v| T::from_f64(v * wc)).collect(),
        )?);
        grads.push(Tensor::from_vec(
            box_shape,
            gbox.into_iter().map(T::from_f64).collect(),
        )?);
        cell_base += plane;
    }
    let parts = LossBreakdown::new(cls_sum / norm, box_sum / norm, dfl_sum / norm, weights);
    for (name, v) in [("cls", parts.cls), ("box", parts.box_), ("dfl", parts.dfl)] {
        if !v.is_finite() {
            return Err(TrainError::NonFinite {
                term: name,
                batch: None,
            });
        }
    }
    let inputs: Vec<Var> = outputs.iter().flat_map(|o| [o.cls, o.box_dist]).collect();
    let out = tape.custom(
        &inputs,
        Tensor::scalar(T::from_f64(parts.total)),
        Box::new(FusedLoss { grads }),
    )?;
    Ok((out, parts))
}
