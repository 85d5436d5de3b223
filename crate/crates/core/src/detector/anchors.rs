//! Anchor and center-point priors, target assignment and box coding.

use crate::error::{config_err, Result};
use crate::geometry::{iou, Box, LevelSpec};

/// Anchors of every level, position-major: index `p·A + a` with
/// `a = scale_index·|ratios| + ratio_index`.
pub fn build_anchors(levels: &[LevelSpec], scales: &[f64], ratios: &[f64]) -> Result<Vec<Vec<Box>>> {
    if scales.is_empty() || ratios.is_empty() {
        return config_err("anchor scales and ratios must be non-empty");
    }
    if scales.iter().chain(ratios).any(|&v| !(v > 0.0 && v.is_finite())) {
        return config_err("anchor scales and ratios must be positive");
    }
    Ok(levels
        .iter()
        .map(|spec| {
            let s = spec.stride as f64;
            let mut out = Vec::with_capacity(spec.bins() * scales.len() * ratios.len());
            for row in 0..spec.height {
                for col in 0..spec.width {
                    let c = spec.bin_center(row, col);
                    for &scale in scales {
                        for &ratio in ratios {
                            let w = scale * s * ratio.sqrt();
                            let h = scale * s / ratio.sqrt();
                            out.push(Box::from_center_size(c.x, c.y, w, h));
                        }
                    }
                }
            }
            out
        })
        .collect())
}

/// Largest log-scale delta accepted when decoding.
pub const MAX_LOG_DELTA: f64 = 4.135166556742356; // ln(1000 / 16)

/// `(dx, dy, dw, dh)` of `gt` relative to `anchor`.
pub fn encode_delta(gt: &Box, anchor: &Box) -> [f64; 4] {
    let (gx, gy, gw, gh) = gt.center_size();
    let (ax, ay, aw, ah) = anchor.center_size();
    [(gx - ax) / aw, (gy - ay) / ah, (gw / aw).ln(), (gh / ah).ln()]
}

pub fn decode_delta(d: &[f64], anchor: &Box) -> Box {
    let (ax, ay, aw, ah) = anchor.center_size();
    let dw = d[2].clamp(-MAX_LOG_DELTA, MAX_LOG_DELTA);
    let dh = d[3].clamp(-MAX_LOG_DELTA, MAX_LOG_DELTA);
    Box::from_center_size(ax + d[0] * aw, ay + d[1] * ah, aw * dw.exp(), ah * dh.exp())
}

/// Log-distances `ln(l/S), ln(t/S), ln(r/S), ln(b/S)` from a point inside `gt`.
pub fn encode_distances(gt: &Box, x: f64, y: f64, stride: usize) -> [f64; 4] {
    let s = stride as f64;
    [(x - gt.x_tl) / s, (y - gt.y_tl) / s, (gt.x_br - x) / s, (gt.y_br - y) / s].map(|d| d.max(1e-6).ln())
}

pub fn decode_distances(d: &[f64], x: f64, y: f64, stride: usize) -> Box {
    let s = stride as f64;
    let e = |v: f64| v.clamp(-MAX_LOG_DELTA, MAX_LOG_DELTA).exp() * s;
    Box { x_tl: x - e(d[0]), y_tl: y - e(d[1]), x_br: x + e(d[2]), y_br: y + e(d[3]) }
}

pub const POSITIVE_IOU: f64 = 0.5;
pub const NEGATIVE_IOU: f64 = 0.4;

/// Assignment of one prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Match {
    Negative,
    Ignore,
    Positive(usize),
}

/// IoU assignment over all priors of all levels (flattened in level order).
/// Each GT's best-overlapping priors are positive as well.
pub fn assign_anchors(anchors: &[&Box], gts: &[Box]) -> Vec<Match> {
    let mut best = vec![(0.0f64, usize::MAX); anchors.len()];
    let mut gt_best = vec![0.0f64; gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let v = iou(a, g);
            if v > best[i].0 {
                best[i] = (v, j);
            }
            gt_best[j] = gt_best[j].max(v);
        }
    }
    let mut out: Vec<Match> = best
        .iter()
        .map(|&(v, j)| {
            if v >= POSITIVE_IOU {
                Match::Positive(j)
            } else if v < NEGATIVE_IOU {
                Match::Negative
            } else {
                Match::Ignore
            }
        })
        .collect();
    for (j, g) in gts.iter().enumerate() {
        if gt_best[j] <= 0.0 {
            continue;
        }
        for (i, a) in anchors.iter().enumerate() {
            if iou(a, g) == gt_best[j] {
                out[i] = Match::Positive(j);
            }
        }
    }
    out
}

/// Upper bound of the object-size range handled by each level in center
/// mode: `max(l, t, r, b)` must fall in `(bounds[l-1], bounds[l]]`.
pub fn center_size_bounds(levels: &[LevelSpec]) -> Vec<f64> {
    let n = levels.len();
    levels
        .iter()
        .enumerate()
        .map(|(i, s)| if i + 1 == n { f64::INFINITY } else { 3.0 * s.stride as f64 })
        .collect()
}

/// Center-mode assignment: a bin center strictly inside a GT whose largest
/// side distance fits the level's range is positive for the smallest such GT.
pub fn assign_points(levels: &[LevelSpec], gts: &[Box]) -> Vec<Match> {
    let bounds = center_size_bounds(levels);
    let mut out = Vec::new();
    for (l, spec) in levels.iter().enumerate() {
        let lo = if l == 0 { 0.0 } else { bounds[l - 1] };
        for row in 0..spec.height {
            for col in 0..spec.width {
                let c = spec.bin_center(row, col);
                let mut pick: Option<(f64, usize)> = None;
                for (j, g) in gts.iter().enumerate() {
                    let inside = c.x > g.x_tl && c.x < g.x_br && c.y > g.y_tl && c.y < g.y_br;
                    if !inside {
                        continue;
                    }
                    let m = (c.x - g.x_tl).max(c.y - g.y_tl).max(g.x_br - c.x).max(g.y_br - c.y);
                    if m > lo && m <= bounds[l] && pick.is_none_or(|(a, _)| g.area() < a) {
                        pick = Some((g.area(), j));
                    }
                }
                out.push(pick.map_or(Match::Negative, |(_, j)| Match::Positive(j)));
            }
        }
    }
    out
}
