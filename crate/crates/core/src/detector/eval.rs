use serde::{Deserialize, Serialize};

use crate::geometry::iou;
use crate::synthdata::Annotation;

use super::Detection;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub const AP_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap90: f64,
    /// Class-mean AP at each entry of `AP_THRESHOLDS`.
    pub per_threshold: Vec<f64>,
}

/// `(image, detection)` pairs of one class, confidence-descending. Ties keep
/// image order and then the order within the image.
fn ranked(dets: &[Vec<Detection>], class: usize) -> Vec<(usize, &Detection)> {
    let mut out: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().filter(move |d| d.class == class).map(move |d| (i, d)))
        .collect();
    out.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
    out
}

/// Best-IoU unmatched GT of the same class at or above `thr`.
fn best_match(d: &Detection, gt: &Annotation, class: usize, used: &[bool], thr: f64) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (j, (b, &c)) in gt.boxes.iter().zip(&gt.classes).enumerate() {
        if c != class || used[j] {
            continue;
        }
        let v = iou(&d.bbox, b);
        if v >= thr && best.is_none_or(|(bv, _)| v > bv) {
            best = Some((v, j));
        }
    }
    best.map(|(_, j)| j)
}

fn gt_count(gts: &[Annotation], class: usize) -> usize {
    gts.iter().map(|g| g.classes.iter().filter(|&&c| c == class).count()).sum()
}

/// All-point interpolated AP of one class, or `None` when the class has no
/// ground truth.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Annotation], class: usize, thr: f64) -> Option<f64> {
    assert_eq!(dets.len(), gts.len(), "one detection list per image");
    let n = gt_count(gts, class);
    if n == 0 {
        return None;
    }
    let order = ranked(dets, class);
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.boxes.len()]).collect();
    let mut tp = 0usize;
    let mut hits = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for (k, (img, d)) in order.iter().enumerate() {
        let hit = match best_match(d, &gts[*img], class, &used[*img], thr) {
            Some(j) => {
                used[*img][j] = true;
                tp += 1;
                true
            }
            None => false,
        };
        hits.push(hit);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    for (k, &hit) in hits.iter().enumerate() {
        if hit {
            sum += precision[k];
        }
    }
    Some(sum / n as f64)
}

pub fn evaluate_ap(dets: &[Vec<Detection>], gts: &[Annotation], num_classes: usize) -> ApSummary {
    let per_threshold: Vec<f64> = AP_THRESHOLDS
        .iter()
        .map(|&thr| {
            let aps: Vec<f64> = (0..num_classes).filter_map(|c| average_precision(dets, gts, c, thr)).collect();
            if aps.is_empty() {
                0.0
            } else {
                aps.iter().sum::<f64>() / aps.len() as f64
            }
        })
        .collect();
    ApSummary {
        ap: per_threshold.iter().sum::<f64>() / per_threshold.len() as f64,
        ap50: per_threshold[0],
        ap75: per_threshold[5],
        ap90: per_threshold[8],
        per_threshold,
    }
}

/// Brute-force AP: every confidence cutoff is matched from scratch and its
/// interpolated precision is the best precision of any deeper cutoff.
pub mod reference {
    use super::*;

    fn prefix_tp(order: &[(usize, &Detection)], gts: &[Annotation], class: usize, thr: f64, len: usize) -> usize {
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.boxes.len()]).collect();
        let mut tp = 0;
        for (img, d) in &order[..len] {
            if let Some(j) = best_match(d, &gts[*img], class, &used[*img], thr) {
                used[*img][j] = true;
                tp += 1;
            }
        }
        tp
    }

    pub fn average_precision(dets: &[Vec<Detection>], gts: &[Annotation], class: usize, thr: f64) -> Option<f64> {
        let n = gt_count(gts, class);
        if n == 0 {
            return None;
        }
        let order = ranked(dets, class);
        let tps: Vec<usize> = (0..=order.len()).map(|len| prefix_tp(&order, gts, class, thr, len)).collect();
        let prec = |len: usize| tps[len] as f64 / len as f64;
        let mut sum = 0.0;
        for len in 1..=order.len() {
            if tps[len] > tps[len - 1] {
                sum += (len..=order.len()).map(prec).fold(f64::NEG_INFINITY, f64::max);
            }
        }
        Some(sum / n as f64)
    }
}
