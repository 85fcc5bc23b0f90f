//! Fine-class detection metrics: COCO-style mAP50-95 and localization-free
//! retrieval accuracy.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor_store::Detection;

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub const IOU_THRESHOLDS: [f64; 10] = {
    let mut t = [0.0; 10];
    let mut i = 0;
    while i < 10 {
        t[i] = (50 + 5 * i) as f64 / 100.0;
        i += 1;
    }
    t
};

pub fn iou(a: &Detection, b: &Detection) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Predictions and ground truth for a single image. Predictions without a fine
/// label (fallback or unpersonalized) are excluded from mAP.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageEval {
    pub predictions: Vec<Detection>,
    pub ground_truth: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub map: f64,
    pub per_threshold: [f64; 10],
}

/// All-points interpolated area under the precision–recall curve.
pub(crate) fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

fn check_labels(images: &[ImageEval], fine_classes: &BTreeSet<String>) -> Result<()> {
    for (i, img) in images.iter().enumerate() {
        for d in img.predictions.iter().chain(&img.ground_truth) {
            if let Some(f) = &d.fine_class {
                if !fine_classes.contains(f) {
                    return Err(Error::Label(format!("image {i}: unknown fine class {f:?}")));
                }
            }
        }
    }
    Ok(())
}

/// Greedy COCO-style matching per class and threshold: predictions in
/// descending confidence take the unmatched same-class ground truth with the
/// highest IoU ≥ t. mAP_t averages over classes present in the ground truth.
pub fn map50_95(images: &[ImageEval], fine_classes: &BTreeSet<String>) -> Result<MapResult> {
    check_labels(images, fine_classes)?;
    let classes: BTreeSet<&str> = images
        .iter()
        .flat_map(|i| {
            i.ground_truth
                .iter()
                .filter_map(|g| g.fine_class.as_deref())
        })
        .collect();
    let mut per_threshold = [0.0; 10];
    if classes.is_empty() {
        return Ok(MapResult {
            map: 0.0,
            per_threshold,
        });
    }
    for class in &classes {
        let gts: Vec<Vec<&Detection>> = images
            .iter()
            .map(|img| {
                img.ground_truth
                    .iter()
                    .filter(|g| g.fine_class.as_deref() == Some(class))
                    .collect()
            })
            .collect();
        let num_gt: usize = gts.iter().map(Vec::len).sum();
        let mut preds: Vec<(usize, &Detection)> = images
            .iter()
            .enumerate()
            .flat_map(|(i, img)| {
                img.predictions
                    .iter()
                    .filter(|p| p.fine_class.as_deref() == Some(class))
                    .map(move |p| (i, p))
            })
            .collect();
        // Stable sort keeps image/list order among equal confidences.
        preds.sort_by(|a, b| {
            b.1.confidence
                .partial_cmp(&a.1.confidence)
                .unwrap_or(Ordering::Equal)
        });
        let ious: Vec<Vec<f64>> = preds
            .iter()
            .map(|(i, p)| gts[*i].iter().map(|g| iou(p, g)).collect())
            .collect();
        for (ti, &t) in IOU_THRESHOLDS.iter().enumerate() {
            let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let mut tp = Vec::with_capacity(preds.len());
            for ((img, _), row) in preds.iter().zip(&ious) {
                let mut best: Option<(usize, f64)> = None;
                for (g, &v) in row.iter().enumerate() {
                    if matched[*img][g] || v < t {
                        continue;
                    }
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((g, v));
                    }
                }
                if let Some((g, _)) = best {
                    matched[*img][g] = true;
                    tp.push(true);
                } else {
                    tp.push(false);
                }
            }
            per_threshold[ti] += average_precision(&tp, num_gt);
        }
    }
    let n = classes.len() as f64;
    per_threshold.iter_mut().for_each(|v| *v /= n);
    let map = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
    Ok(MapResult { map, per_threshold })
}

/// Fraction of fine-labeled ground-truth boxes whose matched prediction carries the
/// same fine label. Ground truth is visited by descending area and takes the
/// unused prediction with the highest positive IoU.
pub fn retrieval_accuracy(images: &[ImageEval]) -> f64 {
    let mut total = 0usize;
    let mut correct = 0usize;
    for img in images {
        let mut gts: Vec<&Detection> = img
            .ground_truth
            .iter()
            .filter(|g| g.fine_class.is_some())
            .collect();
        gts.sort_by(|a, b| b.area().partial_cmp(&a.area()).unwrap_or(Ordering::Equal));
        let mut used = vec![false; img.predictions.len()];
        for g in gts {
            total += 1;
            let mut best: Option<(usize, f64)> = None;
            for (pi, p) in img.predictions.iter().enumerate() {
                if used[pi] {
                    continue;
                }
                let v = iou(g, p);
                if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                    best = Some((pi, v));
                }
            }
            if let Some((pi, _)) = best {
                used[pi] = true;
                if img.predictions[pi].fine_class == g.fine_class {
                    correct += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}
