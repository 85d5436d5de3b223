//! Center and corner points as an auxiliary representation: the point head,
//! its targets and losses, and peak-based top-k key selection.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::geometry::{extract_point, Box, LevelSpec, PointKind};
use crate::numerics::{maxpool3x3_values, DenseArray, ParamStore, Tape, Var};
use crate::relation::{KeyRecord, KeySet};

pub const SCORE_LOSS_WEIGHT: f64 = 0.05;
pub const OFFSET_LOSS_WEIGHT: f64 = 0.2;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeySharing {
    Shared,
    PerLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyBudget {
    pub k: usize,
    pub sharing: KeySharing,
}

impl Default for KeyBudget {
    fn default() -> Self {
        Self { k: 50, sharing: KeySharing::Shared }
    }
}

impl KeyBudget {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return config_err("key budget k must be at least 1");
        }
        Ok(())
    }
}

/// Score logit bias so that initial scores sit near 0.01.
pub fn prior_bias() -> f64 {
    -(99.0f64).ln()
}

fn conv_init(rng: &mut impl Rng, cin: usize, cout: usize, std: f64) -> DenseArray {
    let dist = Normal::new(0.0, std).expect("positive std");
    DenseArray::new(vec![3, 3, cin, cout], (0..9 * cin * cout).map(|_| dist.sample(rng)).collect())
        .expect("consistent shape")
}

/// Adds point-head parameters under `prefix`: `shared{0,1}.{w,b}` and one
/// `{kind}.{w,b}` branch per point kind producing `[score, dx, dy]` logits.
pub fn init_point_head(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut impl Rng) {
    let std = (2.0 / (9 * channels) as f64).sqrt();
    for i in 0..2 {
        store.insert(format!("{prefix}.shared{i}.w"), conv_init(rng, channels, channels, std));
        store.insert(format!("{prefix}.shared{i}.b"), DenseArray::zeros(&[channels]));
    }
    for kind in PointKind::ALL {
        store.insert(format!("{prefix}.{}.w", kind.name()), conv_init(rng, channels, 3, 0.01));
        let b = DenseArray::new(vec![3], vec![prior_bias(), 0.0, 0.0]).expect("3 entries");
        store.insert(format!("{prefix}.{}.b", kind.name()), b);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PointHeadParams {
    pub shared: [(Var, Var); 2],
    pub branches: [(Var, Var); 3],
}

impl PointHeadParams {
    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut pair = |name: String| -> Result<(Var, Var)> {
            Ok((store.bind(tape, &format!("{name}.w"))?, store.bind(tape, &format!("{name}.b"))?))
        };
        let shared = [pair(format!("{prefix}.shared0"))?, pair(format!("{prefix}.shared1"))?];
        let branches = [
            pair(format!("{prefix}.center"))?,
            pair(format!("{prefix}.top_left"))?,
            pair(format!("{prefix}.bottom_right"))?,
        ];
        Ok(Self { shared, branches })
    }
}

/// Point-head outputs on one level. Indexed by [`PointKind::index`].
#[derive(Debug, Clone, Copy)]
pub struct LevelPoints {
    pub spec: LevelSpec,
    /// Shared-conv output `H×W×C`; key features are sampled from it.
    pub features: Var,
    /// Sigmoid scores `H×W×1`.
    pub scores: [Var; 3],
    /// Raw offset logits `H×W×2`.
    pub offset_logits: [Var; 3],
    /// `sigmoid(offset_logits)`, the sub-pixel offsets in `(0, 1)`.
    pub offsets: [Var; 3],
}

pub fn point_head_forward(
    tape: &mut Tape,
    levels: &[(Var, LevelSpec)],
    params: &PointHeadParams,
) -> Result<Vec<LevelPoints>> {
    let mut out = Vec::with_capacity(levels.len());
    for &(x, spec) in levels {
        let s = tape.shape(x);
        if s != [spec.height, spec.width, s[2]] {
            return config_err(format!("level features {s:?} do not match {spec:?}"));
        }
        let mut h = x;
        for (w, b) in params.shared {
            let y = tape.conv3x3(h, w, b)?;
            h = tape.relu(y)?;
        }
        let mut scores = [h; 3];
        let mut offset_logits = [h; 3];
        let mut offsets = [h; 3];
        for kind in PointKind::ALL {
            let (w, b) = params.branches[kind.index()];
            let raw = tape.conv3x3(h, w, b)?;
            let logit = tape.slice_last(raw, 0, 1)?;
            scores[kind.index()] = tape.sigmoid(logit)?;
            let off = tape.slice_last(raw, 1, 2)?;
            offset_logits[kind.index()] = off;
            offsets[kind.index()] = tape.sigmoid(off)?;
        }
        out.push(LevelPoints { spec, features: h, scores, offset_logits, offsets });
    }
    Ok(out)
}

/// Binary score targets and offset targets on one level, row-major over bins.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    pub spec: LevelSpec,
    pub scores: [Vec<f64>; 3],
    /// `H·W·2`; zero away from positive bins.
    pub offsets: [Vec<f64>; 3],
}

impl LevelTargets {
    pub fn positives(&self, kind: PointKind) -> usize {
        self.scores[kind.index()].iter().filter(|&&s| s > 0.5).count()
    }
}

/// Bin and fractional offset of an image point on a level.
pub fn bin_of(x: f64, y: f64, spec: &LevelSpec) -> Option<(usize, usize, f64, f64)> {
    let s = spec.stride as f64;
    let (fx, fy) = (x / s, y / s);
    let (col, row) = (fx.floor(), fy.floor());
    if !(col >= 0.0 && row >= 0.0 && (col as usize) < spec.width && (row as usize) < spec.height) {
        return None;
    }
    Some((row as usize, col as usize, fx - col, fy - row))
}

/// Every GT center and corner is positive on every level. When two points
/// of one kind share a bin, the first box keeps the offset target.
pub fn assign_targets(boxes: &[Box], levels: &[LevelSpec]) -> Result<Vec<LevelTargets>> {
    let mut out = Vec::with_capacity(levels.len());
    for spec in levels {
        let n = spec.bins();
        let mut t = LevelTargets {
            spec: *spec,
            scores: std::array::from_fn(|_| vec![0.0; n]),
            offsets: std::array::from_fn(|_| vec![0.0; 2 * n]),
        };
        for b in boxes {
            b.validate()?;
            for kind in PointKind::ALL {
                let p = extract_point(b, kind);
                let Some((row, col, dx, dy)) = bin_of(p.x, p.y, spec) else {
                    return config_err(format!("{} of box {b:?} lies outside the image", kind.name()));
                };
                let bin = row * spec.width + col;
                if t.scores[kind.index()][bin] == 0.0 {
                    t.scores[kind.index()][bin] = 1.0;
                    t.offsets[kind.index()][2 * bin] = dx;
                    t.offsets[kind.index()][2 * bin + 1] = dy;
                }
            }
        }
        out.push(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct PointLosses {
    pub score: Var,
    pub offset: Var,
}

/// `0.05 ·` mean focal loss over all bins and kinds, and `0.2 ·` smooth L1
/// over positive bins divided by the positive count.
pub fn point_losses(tape: &mut Tape, preds: &[LevelPoints], targets: &[LevelTargets]) -> Result<PointLosses> {
    if preds.len() != targets.len() {
        return config_err(format!("{} predicted levels vs {} target levels", preds.len(), targets.len()));
    }
    let total_bins: usize = targets.iter().map(|t| 3 * t.spec.bins()).sum();
    let positives: usize =
        targets.iter().map(|t| PointKind::ALL.iter().map(|&k| t.positives(k)).sum::<usize>()).sum();
    let mut score = tape.constant(DenseArray::scalar(0.0));
    let mut offset = tape.constant(DenseArray::scalar(0.0));
    for (p, t) in preds.iter().zip(targets) {
        if p.spec != t.spec {
            return config_err(format!("level mismatch: {:?} vs {:?}", p.spec, t.spec));
        }
        for kind in PointKind::ALL {
            let i = kind.index();
            let w = vec![SCORE_LOSS_WEIGHT / total_bins as f64; t.spec.bins()];
            let l = tape.focal_loss(p.scores[i], &t.scores[i], &w, FOCAL_ALPHA, FOCAL_GAMMA)?;
            score = tape.add(score, l)?;
            if positives > 0 && t.positives(kind) > 0 {
                let ow: Vec<f64> = t.scores[i]
                    .iter()
                    .flat_map(|&s| {
                        let v = if s > 0.5 { OFFSET_LOSS_WEIGHT / positives as f64 } else { 0.0 };
                        [v, v]
                    })
                    .collect();
                let l = tape.smooth_l1(p.offsets[i], &t.offsets[i], &ow, 1.0)?;
                offset = tape.add(offset, l)?;
            }
        }
    }
    Ok(PointLosses { score, offset })
}

/// A bin that passed the peak test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

/// Score descending, then `(level, row, col)` ascending.
pub fn candidate_order(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.level.cmp(&b.level))
        .then(a.row.cmp(&b.row))
        .then(a.col.cmp(&b.col))
}

/// Bins whose score equals their 3×3 max-pooled value.
pub fn peaks(scores: &[f64], height: usize, width: usize, level: usize) -> Vec<Candidate> {
    let (pooled, _) = maxpool3x3_values(scores, height, width, 1);
    let mut out = Vec::new();
    for row in 0..height {
        for col in 0..width {
            let i = row * width + col;
            if scores[i] == pooled[i] {
                out.push(Candidate { level, row, col, score: scores[i] });
            }
        }
    }
    out
}

/// Top-k peaks over all levels (shared) or k per level, in candidate order.
pub fn select_bins(maps: &[(&[f64], usize, usize)], budget: &KeyBudget) -> Vec<Candidate> {
    let mut selected = Vec::new();
    match budget.sharing {
        KeySharing::Shared => {
            for (level, &(s, h, w)) in maps.iter().enumerate() {
                selected.extend(peaks(s, h, w, level));
            }
            selected.sort_by(candidate_order);
            selected.truncate(budget.k);
        }
        KeySharing::PerLevel => {
            for (level, &(s, h, w)) in maps.iter().enumerate() {
                let mut c = peaks(s, h, w, level);
                c.sort_by(candidate_order);
                c.truncate(budget.k);
                selected.extend(c);
            }
            selected.sort_by(candidate_order);
        }
    }
    selected
}

/// Image location of a key: `(bin + offset)·stride`.
pub fn decode_location(row: usize, col: usize, dx: f64, dy: f64, stride: usize) -> (f64, f64) {
    let s = stride as f64;
    ((col as f64 + dx) * s, (row as f64 + dy) * s)
}

/// Selects keys of every kind. With `subpixel` off, keys sit on the integer
/// bin corner (offset 0) and no gradient reaches the offset branch.
pub fn select_keys(
    tape: &mut Tape,
    preds: &[LevelPoints],
    budget: &KeyBudget,
    subpixel: bool,
) -> Result<[KeySet; 3]> {
    budget.validate()?;
    if preds.is_empty() {
        return config_err("key selection needs at least one level");
    }
    let mut out: [KeySet; 3] = Default::default();
    for kind in PointKind::ALL {
        out[kind.index()] = select_kind(tape, preds, budget, subpixel, kind)?;
    }
    Ok(out)
}

fn select_kind(
    tape: &mut Tape,
    preds: &[LevelPoints],
    budget: &KeyBudget,
    subpixel: bool,
    kind: PointKind,
) -> Result<KeySet> {
    let i = kind.index();
    let chosen = {
        let maps: Vec<(&[f64], usize, usize)> = preds
            .iter()
            .map(|p| (tape.value(p.scores[i]).data(), p.spec.height, p.spec.width))
            .collect();
        select_bins(&maps, budget)
    };
    if chosen.is_empty() {
        return Ok(KeySet::empty());
    }
    let mut feats = Vec::new();
    let mut locs = Vec::new();
    let mut order = Vec::new();
    let mut records = vec![None; chosen.len()];
    for (level, p) in preds.iter().enumerate() {
        let here: Vec<(usize, &Candidate)> = chosen.iter().enumerate().filter(|(_, c)| c.level == level).collect();
        if here.is_empty() {
            continue;
        }
        let (w, s) = (p.spec.width, p.spec.stride as f64);
        let bins: Vec<usize> = here.iter().map(|(_, c)| c.row * w + c.col).collect();
        let corners: Vec<f64> = here.iter().flat_map(|(_, c)| [c.col as f64, c.row as f64]).collect();
        let corners = tape.constant(DenseArray::new(vec![here.len(), 2], corners)?);
        let bin_units = if subpixel {
            let flat = tape.reshape(p.offsets[i], &[p.spec.bins(), 2])?;
            let off = tape.gather(flat, &bins)?;
            tape.add(off, corners)?
        } else {
            corners
        };
        let loc = tape.scale(bin_units, s)?;
        let shift = tape.constant(DenseArray::filled(&[here.len(), 2], -0.5));
        let grid_coords = tape.add(bin_units, shift)?;
        let f = tape.bilinear(p.features, grid_coords)?;
        let lv = tape.value(loc).data();
        for (n, (slot, c)) in here.iter().enumerate() {
            records[*slot] = Some(KeyRecord {
                kind,
                level,
                row: c.row,
                col: c.col,
                score: c.score,
                x: lv[2 * n],
                y: lv[2 * n + 1],
            });
            order.push(*slot);
        }
        feats.push(f);
        locs.push(loc);
    }
    let feats = tape.concat(&feats, 0)?;
    let locs = tape.concat(&locs, 0)?;
    // rows are level-major; gather back into candidate order
    let mut inverse = vec![0; order.len()];
    for (row, &slot) in order.iter().enumerate() {
        inverse[slot] = row;
    }
    let feats = tape.gather(feats, &inverse)?;
    let locs = tape.gather(locs, &inverse)?;
    Ok(KeySet { tensors: Some((feats, locs)), records: records.into_iter().map(|r| r.expect("every slot filled")).collect() })
}

/// Exhaustive selection used as a test oracle: explicit neighbour scan, full
/// sort, truncation.
pub mod reference {
    use super::{Candidate, KeyBudget, KeySharing};

    fn is_peak(s: &[f64], h: usize, w: usize, r: usize, c: usize) -> bool {
        let v = s[r * w + c];
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w && s[rr as usize * w + cc as usize] > v {
                    return false;
                }
            }
        }
        true
    }

    fn ranked(mut all: Vec<Candidate>) -> Vec<Candidate> {
        all.sort_by(|a, b| {
            let ka = (a.level, a.row, a.col);
            let kb = (b.level, b.row, b.col);
            if a.score > b.score {
                std::cmp::Ordering::Less
            } else if a.score < b.score {
                std::cmp::Ordering::Greater
            } else {
                ka.cmp(&kb)
            }
        });
        all
    }

    pub fn select_bins(maps: &[(&[f64], usize, usize)], budget: &KeyBudget) -> Vec<Candidate> {
        let mut per_level = Vec::new();
        for (level, &(s, h, w)) in maps.iter().enumerate() {
            let mut found = Vec::new();
            for r in 0..h {
                for c in 0..w {
                    if is_peak(s, h, w, r, c) {
                        found.push(Candidate { level, row: r, col: c, score: s[r * w + c] });
                    }
                }
            }
            per_level.push(found);
        }
        match budget.sharing {
            KeySharing::Shared => {
                let mut all = ranked(per_level.into_iter().flatten().collect());
                all.truncate(budget.k);
                all
            }
            KeySharing::PerLevel => ranked(
                per_level
                    .into_iter()
                    .flat_map(|l| {
                        let mut l = ranked(l);
                        l.truncate(budget.k);
                        l
                    })
                    .collect(),
            ),
        }
    }
}
