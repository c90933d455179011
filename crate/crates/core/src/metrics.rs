//! Precision, recall, average precision and mAP over the 0.50:0.95 sweep.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::post::{iou, BBox, Detection};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no class has ground truth; mAP is undefined")]
    NoEvaluableClass,
    #[error("results line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub bbox: BBox,
    pub class_id: usize,
}

/// One line of the results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image_id: String,
    pub class_id: usize,
    pub score: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl ScoredBox {
    pub fn new(image_id: &str, d: &Detection) -> Self {
        ScoredBox {
            image_id: image_id.to_string(),
            class_id: d.class_id,
            score: d.score,
            x1: d.bbox.x1,
            y1: d.bbox.y1,
            x2: d.bbox.x2,
            y2: d.bbox.y2,
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox::new(self.x1, self.y1, self.x2, self.y2)
    }
}

/// Descending score; equal scores fall back to image, class and box so
/// that evaluation does not depend on input order.
pub fn result_order(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then(a.class_id.cmp(&b.class_id))
        .then(a.x1.total_cmp(&b.x1))
        .then(a.y1.total_cmp(&b.y1))
        .then(a.x2.total_cmp(&b.x2))
        .then(a.y2.total_cmp(&b.y2))
}

pub fn write_results_jsonl<W: Write>(mut w: W, results: &[ScoredBox]) -> Result<(), MetricsError> {
    for r in results {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_results_jsonl<R: BufRead>(r: R) -> Result<Vec<ScoredBox>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| MetricsError::Parse {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    /// TP flag per detection, in the order given.
    pub tp: Vec<bool>,
    pub fn_per_image: BTreeMap<String, usize>,
}

impl MatchResult {
    pub fn counts(&self) -> (usize, usize, usize) {
        let tp = self.tp.iter().filter(|&&t| t).count();
        (tp, self.tp.len() - tp, self.fn_per_image.values().sum())
    }
}

/// Greedy matching. `dets` must already be in score order; each one takes
/// the unmatched same-class, same-image ground truth of highest IoU at or
/// above the threshold (lower index on IoU ties).
pub fn match_detections(dets: &[ScoredBox], gts: &[GroundTruth], iou_thresh: f64) -> MatchResult {
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id.as_str()).or_default().push(i);
    }
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for d in dets {
        let db = d.bbox();
        let mut best: Option<(f64, usize)> = None;
        for &gi in by_image
            .get(d.image_id.as_str())
            .map(Vec::as_slice)
            .unwrap_or(&[])
        {
            let g = &gts[gi];
            if used[gi] || g.class_id != d.class_id {
                continue;
            }
            let v = iou(&db, &g.bbox);
            if v >= iou_thresh && best.is_none_or(|(b, _)| v > b) {
                best = Some((v, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                used[gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    let mut fn_per_image = BTreeMap::new();
    for (gi, g) in gts.iter().enumerate() {
        let e = fn_per_image.entry(g.image_id.clone()).or_insert(0);
        if !used[gi] {
            *e += 1;
        }
    }
    MatchResult { tp, fn_per_image }
}

/// Percentages; an empty denominator gives 0.
pub fn precision_recall(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    let pct = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            100.0 * num as f64 / den as f64
        }
    };
    (pct(tp, tp + fp), pct(tp, tp + fn_))
}

/// Area under the all-point interpolated PR curve. `flags` are TP/FP in
/// descending score order. `None` when there is no ground truth.
pub fn average_precision(flags: &[bool], total_gt: usize) -> Option<f64> {
    if total_gt == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // Envelope: best precision at this or any later (higher-recall) point.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let step = 1.0 / total_gt as f64;
    let ap = flags
        .iter()
        .zip(&precision)
        .filter(|(f, _)| **f)
        .fold(0.0, |a, (_, p)| a + p * step);
    Some(ap)
}

/// Mean of the defined per-class APs.
pub fn mean_ap(aps: &[Option<f64>]) -> Result<f64, MetricsError> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(MetricsError::NoEvaluableClass);
    }
    Ok(defined.iter().fold(0.0, |a, b| a + b) / defined.len() as f64)
}

pub const IOU_SWEEP: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class_id: usize,
    pub num_gt: usize,
    pub ap50: Option<f64>,
    pub ap50_95: Option<f64>,
    /// Counts at the operating confidence and IoU 0.5.
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassStats>,
    pub conf_thresh: f64,
    pub precision: f64,
    pub recall: f64,
    /// P and R at the confidence that maximizes F1.
    pub best_f1_precision: f64,
    pub best_f1_recall: f64,
    pub best_f1_conf: f64,
    pub map50: f64,
    pub map50_95: f64,
    /// mAP at each threshold of the sweep.
    pub map_per_iou: Vec<f64>,
    /// Classes with detections but no ground truth.
    pub unevaluable_classes: Vec<usize>,
    pub params: Option<usize>,
    pub gflops: Option<f64>,
}

/// Full evaluation. AP uses every detection; P and R count only those at
/// or above `conf_thresh`.
pub fn evaluate(
    results: &[ScoredBox],
    gts: &[GroundTruth],
    num_classes: usize,
    conf_thresh: f64,
) -> Result<EvalReport, MetricsError> {
    let mut sorted = results.to_vec();
    sorted.sort_by(result_order);

    let mut gt_count = vec![0usize; num_classes];
    for g in gts {
        if g.class_id < num_classes {
            gt_count[g.class_id] += 1;
        }
    }
    let mut per_iou_ap: Vec<Vec<Option<f64>>> = Vec::with_capacity(IOU_SWEEP.len());
    let mut flags50 = Vec::new();
    for (k, &t) in IOU_SWEEP.iter().enumerate() {
        let m = match_detections(&sorted, gts, t);
        let mut aps = Vec::with_capacity(num_classes);
        for (c, &n_gt) in gt_count.iter().enumerate() {
            let flags: Vec<bool> = sorted
                .iter()
                .zip(&m.tp)
                .filter(|(d, _)| d.class_id == c)
                .map(|(_, &f)| f)
                .collect();
            aps.push(average_precision(&flags, n_gt));
        }
        per_iou_ap.push(aps);
        if k == 0 {
            flags50 = m.tp;
        }
    }
    let map_per_iou: Vec<f64> = per_iou_ap
        .iter()
        .map(|a| mean_ap(a))
        .collect::<Result<_, _>>()?;
    let map50 = map_per_iou[0];
    let map50_95 = map_per_iou.iter().fold(0.0, |a, b| a + b) / map_per_iou.len() as f64;

    let total_gt = gts.len();
    let mut per_class = Vec::with_capacity(num_classes);
    let (mut tp_all, mut fp_all) = (0, 0);
    for c in 0..num_classes {
        let (mut tp, mut fp) = (0, 0);
        for (d, &f) in sorted.iter().zip(&flags50) {
            if d.class_id == c && d.score >= conf_thresh {
                if f {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        tp_all += tp;
        fp_all += fp;
        let ap50_95 = if gt_count[c] == 0 {
            None
        } else {
            Some(
                per_iou_ap.iter().fold(0.0, |s, a| s + a[c].unwrap_or(0.0))
                    / IOU_SWEEP.len() as f64,
            )
        };
        per_class.push(ClassStats {
            class_id: c,
            num_gt: gt_count[c],
            ap50: per_iou_ap[0][c],
            ap50_95,
            tp,
            fp,
            fn_: gt_count[c] - tp,
        });
    }
    let (precision, recall) = precision_recall(tp_all, fp_all, total_gt - tp_all);

    let (mut best_f1, mut best) = (-1.0, (0.0, 0.0, 1.0));
    let mut tp = 0;
    for (i, (d, &f)) in sorted.iter().zip(&flags50).enumerate() {
        if f {
            tp += 1;
        }
        let last_at_score = sorted.get(i + 1).is_none_or(|n| n.score != d.score);
        if !last_at_score {
            continue;
        }
        let (p, r) = precision_recall(tp, i + 1 - tp, total_gt - tp);
        let f1 = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
        if f1 > best_f1 {
            best_f1 = f1;
            best = (p, r, d.score);
        }
    }
    let mut unevaluable: Vec<usize> = sorted
        .iter()
        .map(|d| d.class_id)
        .filter(|&c| c >= num_classes || gt_count[c] == 0)
        .collect();
    unevaluable.sort_unstable();
    unevaluable.dedup();

    Ok(EvalReport {
        per_class,
        conf_thresh,
        precision,
        recall,
        best_f1_precision: best.0,
        best_f1_recall: best.1,
        best_f1_conf: best.2,
        map50,
        map50_95,
        map_per_iou,
        unevaluable_classes: unevaluable,
        params: None,
        gflops: None,
    })
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "AP: all-point interpolated area under the PR curve; greedy score-ordered matching"
        );
        let _ = writeln!(
            s,
            "{:>6} {:>6} {:>8} {:>10} {:>5} {:>5} {:>5}",
            "class", "gt", "AP50", "AP50:95", "TP", "FP", "FN"
        );
        for c in &self.per_class {
            let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:>6} {:>6} {:>8} {:>10} {:>5} {:>5} {:>5}",
                c.class_id,
                c.num_gt,
                f(c.ap50),
                f(c.ap50_95),
                c.tp,
                c.fp,
                c.fn_
            );
        }
        let _ = writeln!(
            s,
            "P {:.2} R {:.2} at conf {}",
            self.precision, self.recall, self.conf_thresh
        );
        let _ = writeln!(
            s,
            "P {:.2} R {:.2} at best-F1 conf {:.3}",
            self.best_f1_precision, self.best_f1_recall, self.best_f1_conf
        );
        let _ = writeln!(
            s,
            "mAP@0.5 {:.4}  mAP@0.5:0.95 {:.4}",
            self.map50, self.map50_95
        );
        if let (Some(p), Some(g)) = (self.params, self.gflops) {
            let _ = writeln!(s, "params {p}  GFLOPs {g:.2}");
        }
        if !self.unevaluable_classes.is_empty() {
            let _ = writeln!(
                s,
                "classes without ground truth: {:?}",
                self.unevaluable_classes
            );
        }
        s
    }
}
