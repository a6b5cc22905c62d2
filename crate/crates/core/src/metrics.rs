//! Detection and interaction average precision plus the token coverage
//! diagnostic.

use serde::Serialize;

use crate::scenes::{corners, BoxCxCyWh};

/// Intersection over union of two `(cx, cy, w, h)` boxes; 0 when the union
/// is empty.
pub fn iou(a: &BoxCxCyWh, b: &BoxCxCyWh) -> f64 {
    let [ax0, ay0, ax1, ay1] = corners(a);
    let [bx0, by0, bx1, by1] = corners(b);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a[2].max(0.0) * a[3].max(0.0) + b[2].max(0.0) * b[3].max(0.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Area under the precision envelope. `hits` are the TP flags of the
/// detections sorted by descending score.
pub fn average_precision(hits: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    Some(ap)
}

fn sorted_by_score<T>(items: &[T], score: impl Fn(&T) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| score(&items[b]).total_cmp(&score(&items[a])));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HoiPrediction {
    pub scene: usize,
    pub human_box: BoxCxCyWh,
    pub object_box: BoxCxCyWh,
    pub verb: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HoiGroundTruth {
    pub scene: usize,
    pub human_box: BoxCxCyWh,
    pub object_box: BoxCxCyWh,
    pub verb: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HoiMapReport {
    /// `None` for verbs without ground truth.
    pub per_verb: Vec<Option<f64>>,
    /// Mean over verbs with ground truth (0 if there are none).
    pub map: f64,
    pub excluded_verbs: Vec<usize>,
}

fn mean_defined(per_class: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

/// Per-verb AP. A prediction is a true positive when its verb matches, both
/// boxes overlap an unclaimed ground truth of the same scene with IoU above
/// `iou_threshold`; predictions are visited by descending score and claim the
/// best-overlapping candidate (largest smaller-of-two IoU).
pub fn hoi_map(preds: &[HoiPrediction], gts: &[HoiGroundTruth], num_verbs: usize, iou_threshold: f64) -> HoiMapReport {
    let mut per_verb = Vec::with_capacity(num_verbs);
    for v in 0..num_verbs {
        let vg: Vec<&HoiGroundTruth> = gts.iter().filter(|g| g.verb == v).collect();
        let vp: Vec<&HoiPrediction> = preds.iter().filter(|p| p.verb == v).collect();
        let mut claimed = vec![false; vg.len()];
        let hits: Vec<bool> = sorted_by_score(&vp, |p| p.score)
            .into_iter()
            .map(|k| {
                let p = vp[k];
                let mut best: Option<(usize, f64)> = None;
                for (gi, g) in vg.iter().enumerate() {
                    if claimed[gi] || g.scene != p.scene {
                        continue;
                    }
                    let overlap = iou(&p.human_box, &g.human_box).min(iou(&p.object_box, &g.object_box));
                    if overlap > iou_threshold && best.is_none_or(|(_, o)| overlap > o) {
                        best = Some((gi, overlap));
                    }
                }
                if let Some((gi, _)) = best {
                    claimed[gi] = true;
                }
                best.is_some()
            })
            .collect();
        per_verb.push(average_precision(&hits, vg.len()));
    }
    let excluded_verbs = per_verb.iter().enumerate().filter(|(_, a)| a.is_none()).map(|(v, _)| v).collect();
    HoiMapReport {
        map: mean_defined(&per_verb),
        per_verb,
        excluded_verbs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionPrediction {
    pub scene: usize,
    /// Detection category; humans and each object class are separate categories.
    pub category: usize,
    pub bbox: BoxCxCyWh,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionGroundTruth {
    pub scene: usize,
    pub category: usize,
    pub bbox: BoxCxCyWh,
}

/// Box AP at IoU >= 0.5, averaged over categories present in the ground truth.
pub fn instance_ap50(preds: &[DetectionPrediction], gts: &[DetectionGroundTruth], num_categories: usize) -> (f64, Vec<Option<f64>>) {
    let mut per_cat = Vec::with_capacity(num_categories);
    for c in 0..num_categories {
        let cg: Vec<&DetectionGroundTruth> = gts.iter().filter(|g| g.category == c).collect();
        let cp: Vec<&DetectionPrediction> = preds.iter().filter(|p| p.category == c).collect();
        let mut claimed = vec![false; cg.len()];
        let hits: Vec<bool> = sorted_by_score(&cp, |p| p.score)
            .into_iter()
            .map(|k| {
                let p = cp[k];
                let mut best: Option<(usize, f64)> = None;
                for (gi, g) in cg.iter().enumerate() {
                    if claimed[gi] || g.scene != p.scene {
                        continue;
                    }
                    let o = iou(&p.bbox, &g.bbox);
                    if o >= 0.5 && best.is_none_or(|(_, b)| o > b) {
                        best = Some((gi, o));
                    }
                }
                if let Some((gi, _)) = best {
                    claimed[gi] = true;
                }
                best.is_some()
            })
            .collect();
        per_cat.push(average_precision(&hits, cg.len()));
    }
    (mean_defined(&per_cat), per_cat)
}

/// Chains two column-stochastic assignments: `a2: [n2, n1]` times
/// `a1: [n1, cells]` gives `[n2, cells]`.
pub fn compose_assignments(a1: &[f64], a2: &[f64], n1: usize, n2: usize, cells: usize) -> Vec<f64> {
    let mut out = vec![0.0; n2 * cells];
    for c in 0..n2 {
        for k in 0..n1 {
            let w = a2[c * n1 + k];
            for t in 0..cells {
                out[c * cells + t] += w * a1[k * cells + t];
            }
        }
    }
    out
}

/// Center with the largest weight for every cell of an `[n, cells]` assignment.
pub fn cell_owners(assignment: &[f64], n: usize, cells: usize) -> Vec<usize> {
    (0..cells)
        .map(|t| {
            let mut best = 0;
            for c in 1..n {
                if assignment[c * cells + t] > assignment[best * cells + t] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Grid cells whose centers fall inside a normalized box.
pub fn instance_mask(bbox: &BoxCxCyWh, grid_h: usize, grid_w: usize) -> Vec<bool> {
    let [x0, y0, x1, y1] = corners(bbox);
    let mut out = Vec::with_capacity(grid_h * grid_w);
    for r in 0..grid_h {
        for c in 0..grid_w {
            let (x, y) = ((c as f64 + 0.5) / grid_w as f64, (r as f64 + 0.5) / grid_h as f64);
            out.push(x >= x0 && x <= x1 && y >= y0 && y <= y1);
        }
    }
    out
}

/// Fraction of the masked cells owned by `center`; `None` for an empty mask.
pub fn coverage_rate(owners: &[usize], mask: &[bool], center: usize) -> Option<f64> {
    let inside: Vec<usize> = owners.iter().zip(mask).filter(|(_, &m)| m).map(|(&o, _)| o).collect();
    if inside.is_empty() {
        None
    } else {
        Some(inside.iter().filter(|&&o| o == center).count() as f64 / inside.len() as f64)
    }
}

/// Coverage reported for part-attending query detectors; display only.
pub const REFERENCE_PART_COVERAGE: f64 = 0.1485;
