//! Head outputs to boxes, and boxes to checkout artifacts.

mod annotate;
mod receipt;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::tensor::{ops, Element, Tensor, TensorError};

pub use annotate::{annotate, palette_color, PALETTE};
pub use receipt::{build_receipt, Catalog, CatalogEntry, CatalogError, Receipt, ReceiptLine};

pub const DEFAULT_CONF: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.45;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x > self.x1 && x < self.x2 && y > self.y1 && y < self.y2
    }
}

/// Intersection over union; 0 when either box has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Descending score, then lower class, x1, y1, x2, y2.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.bbox.x2.total_cmp(&b.bbox.x2))
        .then(a.bbox.y2.total_cmp(&b.bbox.y2))
}

/// Class-wise greedy suppression: a box is dropped when it overlaps a
/// kept box of its class with IoU above `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order = dets.to_vec();
    order.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Raw head maps at one stride for a batch.
#[derive(Clone, Debug)]
pub struct HeadMaps<T> {
    /// `(N, nc, H, W)` logits.
    pub cls: Tensor<T>,
    /// `(N, 4 * reg_max, H, W)` bin logits, sides ordered left, top, right, bottom.
    pub box_dist: Tensor<T>,
    pub stride: usize,
}

/// Expected bin index of each side at every cell: `(N, 4, H, W)`.
pub fn dfl_expectation<T: Element>(box_dist: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let s = box_dist.shape();
    if !s.c.is_multiple_of(4) || s.c == 0 {
        return Err(TensorError::dim(
            "decode",
            format!("box channels {} not a multiple of 4", s.c),
        ));
    }
    let reg_max = s.c / 4;
    let plane = s.plane();
    let mut out = Tensor::zeros(crate::tensor::Shape::new(s.n, 4, s.h, s.w));
    for n in 0..s.n {
        for side in 0..4 {
            let bins = box_dist.sample(n).channels(side * reg_max, reg_max);
            let p = ops::softmax(&bins, 1)?;
            for i in 0..plane {
                let mut e = 0.0;
                for b in 0..reg_max {
                    e += b as f64 * p.data()[b * plane + i].as_f64();
                }
                out.data_mut()[(n * 4 + side) * plane + i] = T::from_f64(e);
            }
        }
    }
    Ok(out)
}

/// Detections for one image of the batch, before NMS.
pub fn decode<T: Element>(
    maps: &[HeadMaps<T>],
    sample: usize,
    image_size: (usize, usize),
    conf_thresh: f64,
) -> Result<Vec<Detection>, TensorError> {
    let (img_w, img_h) = image_size;
    let mut dets = Vec::new();
    for m in maps {
        let (cs, bs) = (m.cls.shape(), m.box_dist.shape());
        if cs.n != bs.n || cs.h != bs.h || cs.w != bs.w || sample >= cs.n {
            return Err(TensorError::dim(
                "decode",
                format!("cls {cs} vs box {bs}, sample {sample}"),
            ));
        }
        if cs.h * m.stride != img_h || cs.w * m.stride != img_w {
            return Err(TensorError::dim(
                "decode",
                format!(
                    "{}x{} cells at stride {} vs image {img_w}x{img_h}",
                    cs.w, cs.h, m.stride
                ),
            ));
        }
        let dist = dfl_expectation(&m.box_dist.sample(sample))?;
        let cls = m.cls.sample(sample);
        let plane = cs.plane();
        let stride = m.stride as f64;
        for i in 0..cs.h {
            for j in 0..cs.w {
                let cell = i * cs.w + j;
                let (mut best, mut best_c) = (f64::NEG_INFINITY, 0);
                for c in 0..cs.c {
                    let v = cls.data()[c * plane + cell].as_f64();
                    if v > best {
                        best = v;
                        best_c = c;
                    }
                }
                let score = ops::sigmoid(best);
                if score < conf_thresh || score <= 0.0 {
                    continue;
                }
                let side = |k: usize| dist.data()[k * plane + cell].as_f64() * stride;
                let (cx, cy) = ((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride);
                let bbox = BBox::new(cx - side(0), cy - side(1), cx + side(2), cy + side(3))
                    .clip(img_w as f64, img_h as f64);
                dets.push(Detection {
                    bbox,
                    class_id: best_c,
                    score,
                });
            }
        }
    }
    Ok(dets)
}
