use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{iou, Box};
use crate::numerics::{ParamStore, Tape};

use super::{build_anchors, decode_delta, decode_distances, forward, BatchMaps, DetectorConfig, ForwardOutput, QueryMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    /// Highest-scoring candidates kept per level before NMS.
    pub pre_nms: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { score_threshold: 0.05, nms_iou: 0.5, max_detections: 100, pre_nms: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box,
    pub class: usize,
    pub confidence: f64,
}

/// Greedy per-class suppression. Input order is irrelevant; output is
/// sorted by descending confidence with ties broken by input position.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64, max: usize) -> Vec<Detection> {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        if keep.len() >= max {
            break;
        }
        if keep.iter().any(|k| k.class == d.class && iou(&k.bbox, &d.bbox) > iou_threshold) {
            continue;
        }
        keep.push(d);
    }
    keep
}

pub fn decode_detections(tape: &Tape, out: &ForwardOutput, cfg: &DetectorConfig, ic: &InferConfig) -> Result<Vec<Detection>> {
    let specs = cfg.level_specs();
    let a = cfg.anchors_per_position();
    let nc = cfg.num_classes;
    let anchors = match cfg.query_mode {
        QueryMode::Anchor => Some(build_anchors(&specs, &cfg.anchor_scales, &cfg.anchor_ratios)?),
        QueryMode::Center => None,
    };
    let extent = cfg.image_size as f64;
    let mut all = Vec::new();
    for (l, lo) in out.levels.iter().enumerate() {
        let spec = lo.spec;
        let hw = spec.bins();
        let probs = tape.value(lo.cls_prob).data();
        let reg = tape.value(lo.reg).data();
        let mut cands: Vec<(f64, usize)> = probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > ic.score_threshold)
            .map(|(i, &p)| (p, i))
            .collect();
        cands.sort_by(|x, y| y.0.total_cmp(&x.0));
        cands.truncate(ic.pre_nms);
        for (p, i) in cands {
            let class = i % nc;
            let pa = i / nc;
            let (pos, ai) = (pa / a, pa % a);
            let row = ai * hw + pos;
            let d = &reg[row * 4..row * 4 + 4];
            let b = match &anchors {
                Some(an) => decode_delta(d, &an[l][pos * a + ai]),
                None => {
                    let c = spec.bin_center(pos / spec.width, pos % spec.width);
                    decode_distances(d, c.x, c.y, spec.stride)
                }
            };
            let b = b.clipped(extent, extent);
            if b.width() > 0.0 && b.height() > 0.0 {
                all.push(Detection { bbox: b, class, confidence: p });
            }
        }
    }
    Ok(nms(all, ic.nms_iou, ic.max_detections))
}

pub fn infer(
    store: &ParamStore,
    cfg: &DetectorConfig,
    image: &crate::numerics::DenseArray,
    ic: &InferConfig,
) -> Result<Vec<Detection>> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, store, cfg, image, &BatchMaps::default())?;
    decode_detections(&tape, &out, cfg, ic)
}
