use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::keypoints::{assign_targets, point_losses, FOCAL_ALPHA, FOCAL_GAMMA};
use crate::numerics::{Gradients, ParamStore, Tape, Var};
use crate::synthdata::{Annotation, Dataset, Sample};

use super::{
    assign_anchors, assign_points, build_anchors, decode_detections, encode_delta, encode_distances, evaluate_ap,
    forward, init_params, ApSummary, BatchMaps, Detection, DetectorConfig, ForwardOutput, InferConfig, Match,
    QueryMode,
};

/// Smooth L1 transition point for box deltas.
pub const BOX_BETA: f64 = 1.0 / 9.0;

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub cls: Var,
    pub reg: Var,
    pub point_score: Option<Var>,
    pub point_offset: Option<Var>,
    pub total: Var,
}

/// Classification focal loss and box smooth L1, both divided by the number
/// of positive priors, plus the point-head losses when attention is on.
pub fn detection_loss(tape: &mut Tape, out: &ForwardOutput, cfg: &DetectorConfig, ann: &Annotation) -> Result<LossParts> {
    let specs = cfg.level_specs();
    let a = cfg.anchors_per_position();
    let nc = cfg.num_classes;
    if ann.classes.iter().any(|&c| c >= nc) {
        return config_err(format!("annotation class ids {:?} exceed {nc} classes", ann.classes));
    }
    let matches = match cfg.query_mode {
        QueryMode::Anchor => {
            let anchors = build_anchors(&specs, &cfg.anchor_scales, &cfg.anchor_ratios)?;
            let flat: Vec<_> = anchors.iter().flatten().collect();
            let m = assign_anchors(&flat, &ann.boxes);
            (m, Some(anchors))
        }
        QueryMode::Center => (assign_points(&specs, &ann.boxes), None),
    };
    let (matches, anchors) = matches;
    let npos = matches.iter().filter(|m| matches!(m, Match::Positive(_))).count().max(1) as f64;

    let mut cls_total = tape.constant(crate::numerics::DenseArray::scalar(0.0));
    let mut reg_total = cls_total;
    let mut offset = 0;
    for (l, (lo, spec)) in out.levels.iter().zip(&specs).enumerate() {
        let hw = spec.bins();
        let level_matches = &matches[offset..offset + hw * a];
        offset += hw * a;
        let mut ct = vec![0.0; hw * a * nc];
        let mut cw = vec![0.0; hw * a * nc];
        let mut rt = vec![0.0; hw * a * 4];
        let mut rw = vec![0.0; hw * a * 4];
        for p in 0..hw {
            for ai in 0..a {
                let m = level_matches[p * a + ai];
                let base = (p * a + ai) * nc;
                if m != Match::Ignore {
                    cw[base..base + nc].iter_mut().for_each(|w| *w = 1.0 / npos);
                }
                if let Match::Positive(j) = m {
                    ct[base + ann.classes[j]] = 1.0;
                    let gt = &ann.boxes[j];
                    let d = match &anchors {
                        Some(an) => encode_delta(gt, &an[l][p * a + ai]),
                        None => {
                            let c = spec.bin_center(p / spec.width, p % spec.width);
                            encode_distances(gt, c.x, c.y, spec.stride)
                        }
                    };
                    let row = ai * hw + p;
                    rt[row * 4..row * 4 + 4].copy_from_slice(&d);
                    rw[row * 4..row * 4 + 4].iter_mut().for_each(|w| *w = 1.0 / npos);
                }
            }
        }
        let c = tape.focal_loss(lo.cls_prob, &ct, &cw, FOCAL_ALPHA, FOCAL_GAMMA)?;
        cls_total = tape.add(cls_total, c)?;
        let r = tape.smooth_l1(lo.reg, &rt, &rw, BOX_BETA)?;
        reg_total = tape.add(reg_total, r)?;
    }
    let mut total = tape.add(cls_total, reg_total)?;
    let (mut ps, mut po) = (None, None);
    if cfg.any_bvr() {
        let targets = assign_targets(&ann.boxes, &specs)?;
        let pl = point_losses(tape, &out.points, &targets)?;
        total = tape.add(total, pl.score)?;
        total = tape.add(total, pl.offset)?;
        ps = Some(pl.score);
        po = Some(pl.offset);
    }
    Ok(LossParts { cls: cls_total, reg: reg_total, point_score: ps, point_offset: po, total })
}

pub fn image_loss(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &DetectorConfig,
    sample: &Sample,
    maps: &BatchMaps,
) -> Result<(ForwardOutput, LossParts)> {
    let out = forward(tape, store, cfg, &sample.image, maps)?;
    let loss = detection_loss(tape, &out, cfg, &sample.annotation)?;
    Ok((out, loss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub loss_point_score: f64,
    pub loss_point_offset: f64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap90: f64,
    /// Mean loss of each iteration in this epoch.
    pub iteration_losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub metrics: Vec<EpochMetrics>,
    pub final_ap: ApSummary,
}

fn learning_rate(cfg: &DetectorConfig, epoch: usize, iter: usize) -> f64 {
    let o = &cfg.optim;
    let decays = o.decay_epochs.iter().filter(|&&e| epoch >= e).count() as i32;
    let mut lr = o.learning_rate * o.decay_factor.powi(decays);
    if iter < o.warmup_iters {
        let t = iter as f64 / o.warmup_iters as f64;
        lr *= o.warmup_ratio + (1.0 - o.warmup_ratio) * t;
    }
    lr
}

fn scalar(tape: &Tape, v: Option<Var>) -> f64 {
    v.and_then(|v| tape.value(v).item()).unwrap_or(0.0)
}

/// Gradient of the batch-mean loss. Shared maps are built once on a batch
/// tape and enter each image's tape as a leaf; their gradients are summed
/// and pushed back through the map construction.
fn batch_gradients(
    store: &ParamStore,
    cfg: &DetectorConfig,
    batch: &[&Sample],
    sums: &mut [f64; 5],
) -> Result<Gradients> {
    let mut bt = Tape::new();
    let (maps, map_vars) = BatchMaps::build(&mut bt, store, cfg)?;
    let mut grads = Gradients::default();
    let mut map_grads: Vec<Option<crate::numerics::DenseArray>> = vec![None; map_vars.len()];
    let inv = 1.0 / batch.len() as f64;
    for sample in batch {
        let mut tape = Tape::new();
        let (_, loss) = image_loss(&mut tape, store, cfg, sample, &maps)?;
        let parts = [Some(loss.total), Some(loss.cls), Some(loss.reg), loss.point_score, loss.point_offset];
        for (s, v) in sums.iter_mut().zip(parts) {
            *s += scalar(&tape, v);
        }
        let scaled = tape.scale(loss.total, inv)?;
        let mut g = tape.backward(scaled)?;
        for (slot, (name, _)) in map_grads.iter_mut().zip(&map_vars) {
            if let Some(mg) = g.remove(name) {
                match slot {
                    Some(acc) => acc.add_assign(&mg),
                    None => *slot = Some(mg),
                }
            }
        }
        grads.accumulate(&g);
    }
    let seeds: Vec<_> = map_vars
        .iter()
        .zip(map_grads)
        .filter_map(|((_, v), g)| g.map(|g| (*v, g)))
        .collect();
    if !seeds.is_empty() {
        grads.accumulate(&bt.backward_seeded(&seeds)?);
    }
    for (name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::Numeric { kernel: "backward".into(), detail: format!("gradient of `{name}` is not finite") });
        }
    }
    Ok(grads)
}

fn sgd_step(
    store: &mut ParamStore,
    grads: &Gradients,
    velocity: &mut BTreeMap<String, Vec<f64>>,
    cfg: &DetectorConfig,
    lr: f64,
) {
    let o = &cfg.optim;
    let clip = match o.grad_clip {
        Some(max) => {
            let norm = grads.iter().map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    for (name, p) in store.iter_mut() {
        let v = velocity.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
        let g = grads.get(name).map(|g| g.data());
        for (i, (pv, vv)) in p.data_mut().iter_mut().zip(v.iter_mut()).enumerate() {
            let d = g.map_or(0.0, |g| g[i] * clip) + o.weight_decay * *pv;
            *vv = o.momentum * *vv + d;
            *pv -= lr * *vv;
        }
    }
}

/// Detections for every sample with maps built once up front.
pub fn evaluate_split(
    store: &ParamStore,
    cfg: &DetectorConfig,
    ds: &Dataset,
    infer_cfg: &InferConfig,
) -> Result<(Vec<Vec<Detection>>, ApSummary)> {
    let mut bt = Tape::new();
    let (maps, _) = BatchMaps::build(&mut bt, store, cfg)?;
    let mut all = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let mut tape = Tape::new();
        let out = forward(&mut tape, store, cfg, &s.image, &maps)?;
        all.push(decode_detections(&tape, &out, cfg, infer_cfg)?);
    }
    let gts: Vec<Annotation> = ds.samples.iter().map(|s| s.annotation.clone()).collect();
    let ap = evaluate_ap(&all, &gts, cfg.num_classes);
    Ok((all, ap))
}

/// SGD training from `init_params(cfg, seed)`. `on_epoch` sees each epoch's
/// metrics and parameters as soon as they exist.
pub fn train(
    cfg: &DetectorConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochMetrics, &ParamStore) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.samples.is_empty() {
        return config_err("training set is empty");
    }
    let mut store = init_params(cfg, seed)?;
    let mut velocity = BTreeMap::new();
    let infer_cfg = InferConfig::default();
    let mut metrics = Vec::new();
    let mut iter = 0;
    let mut final_ap = ApSummary::default();
    for epoch in 0..cfg.optim.epochs {
        let mut order: Vec<usize> = (0..train_set.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        let mut lr = 0.0;
        let mut iteration_losses = Vec::new();
        for chunk in order.chunks(cfg.optim.batch_size) {
            lr = learning_rate(cfg, epoch, iter);
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set.samples[i]).collect();
            let before = sums[0];
            let grads = batch_gradients(&store, cfg, &batch, &mut sums)?;
            iteration_losses.push((sums[0] - before) / batch.len() as f64);
            sgd_step(&mut store, &grads, &mut velocity, cfg, lr);
            iter += 1;
        }
        let n = train_set.samples.len() as f64;
        let (_, ap) = evaluate_split(&store, cfg, val_set, &infer_cfg)?;
        let m = EpochMetrics {
            epoch,
            learning_rate: lr,
            loss: sums[0] / n,
            loss_cls: sums[1] / n,
            loss_reg: sums[2] / n,
            loss_point_score: sums[3] / n,
            loss_point_offset: sums[4] / n,
            ap: ap.ap,
            ap50: ap.ap50,
            ap75: ap.ap75,
            ap90: ap.ap90,
            iteration_losses,
        };
        on_epoch(&m, &store)?;
        metrics.push(m);
        final_ap = ap;
    }
    Ok(TrainOutcome { params: store, metrics, final_ap })
}
