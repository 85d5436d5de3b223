//! A miniature single-stage detector whose classification and regression
//! branches can each be enhanced by cross-representation attention.
//!
//! Backbone: 3×3 conv + ReLU blocks separated by 2×2 average pooling,
//! giving levels at strides 4, 8, 16, ... Each level feeds a classification
//! tower and a regression tower shared across levels. Queries are anchor
//! boxes (`QueryMode::Anchor`) or bin centers (`QueryMode::Center`).

mod anchors;
mod checkpoint;
mod eval;
mod infer;
mod model;
mod train;

pub use anchors::{
    assign_anchors, assign_points, build_anchors, center_size_bounds, decode_delta, decode_distances, encode_delta,
    encode_distances, Match, MAX_LOG_DELTA, NEGATIVE_IOU, POSITIVE_IOU,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, CHECKPOINT_VERSION};
pub use eval::{average_precision, evaluate_ap, reference as ap_reference, ApSummary, AP_THRESHOLDS};
pub use infer::{decode_detections, infer, nms, Detection, InferConfig};
pub use model::{forward, BatchMaps, ForwardOutput, ForwardStats, LevelOutput};
pub use train::{
    detection_loss, evaluate_split, image_loss, train, EpochMetrics, LossParts, TrainOutcome, BOX_BETA,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::geometry::LevelSpec;
use crate::keypoints::{init_point_head, prior_bias, KeyBudget, KeySharing};
use crate::numerics::{DenseArray, ParamStore};
use crate::relation::{AttentionParams, GeometryMode, RelationConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    Anchor,
    Center,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs (0-based) at whose start the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Linear warmup length in iterations, from `warmup_ratio·lr`.
    pub warmup_iters: usize,
    pub warmup_ratio: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 6,
            batch_size: 8,
            decay_epochs: vec![5],
            decay_factor: 0.1,
            warmup_iters: 100,
            warmup_ratio: 0.1,
            grad_clip: Some(10.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Pyramid feature dim `C`.
    pub channels: usize,
    pub levels: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub head_convs: usize,
    pub num_classes: usize,
    pub query_mode: QueryMode,
    pub cls_bvr: bool,
    pub reg_bvr: bool,
    pub appearance: bool,
    pub geometry: GeometryMode,
    pub subpixel: bool,
    pub relation: RelationConfig,
    pub keys: KeyBudget,
    pub optim: OptimConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            stem_channels: 16,
            channels: 32,
            levels: 3,
            anchor_scales: vec![2.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            head_convs: 1,
            num_classes: 3,
            query_mode: QueryMode::Anchor,
            cls_bvr: true,
            reg_bvr: true,
            appearance: true,
            geometry: GeometryMode::Shared,
            subpixel: true,
            relation: RelationConfig { channels: 32, heads: 4, embed_dim: 32, hidden_dim: 32, map_size: 64, unit_ratio: 0.5 },
            keys: KeyBudget { k: 10, sharing: KeySharing::Shared },
            optim: OptimConfig::default(),
        }
    }
}

/// Smallest stride of the pyramid.
pub const BASE_STRIDE: usize = 4;

impl DetectorConfig {
    pub fn baseline() -> Self {
        Self { cls_bvr: false, reg_bvr: false, ..Self::default() }
    }

    pub fn any_bvr(&self) -> bool {
        self.cls_bvr || self.reg_bvr
    }

    pub fn anchors_per_position(&self) -> usize {
        match self.query_mode {
            QueryMode::Anchor => self.anchor_scales.len() * self.anchor_ratios.len(),
            QueryMode::Center => 1,
        }
    }

    pub fn level_specs(&self) -> Vec<LevelSpec> {
        (0..self.levels)
            .map(|l| {
                let stride = BASE_STRIDE << l;
                let n = self.image_size / stride;
                LevelSpec { stride, height: n, width: n }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.channels == 0 || self.stem_channels == 0 || self.in_channels == 0 {
            return config_err("detector widths and level count must be positive");
        }
        let top = BASE_STRIDE << (self.levels - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(top) {
            return config_err(format!("image size {} must be a positive multiple of {top}", self.image_size));
        }
        if self.num_classes == 0 {
            return config_err("num_classes must be positive");
        }
        if self.query_mode == QueryMode::Anchor && (self.anchor_scales.is_empty() || self.anchor_ratios.is_empty()) {
            return config_err("anchor mode needs at least one scale and one ratio");
        }
        if self.anchor_scales.iter().chain(&self.anchor_ratios).any(|&v| !(v > 0.0 && v.is_finite())) {
            return config_err("anchor scales and ratios must be positive");
        }
        if self.any_bvr() {
            if !self.appearance && self.geometry == GeometryMode::Off {
                return config_err("attention needs the appearance term, the geometry term, or both");
            }
            if self.relation.channels != self.channels {
                return config_err(format!(
                    "relation channels {} differ from detector channels {}",
                    self.relation.channels, self.channels
                ));
            }
            self.relation.validate()?;
            self.keys.validate()?;
        }
        let o = &self.optim;
        if o.batch_size == 0 || !(o.learning_rate >= 0.0) || !(0.0..1.0).contains(&o.momentum) || o.weight_decay < 0.0 {
            return config_err(format!("invalid optimizer settings: {o:?}"));
        }
        if o.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return config_err("grad_clip must be positive when set");
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> DenseArray {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).expect("positive std");
    DenseArray::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).expect("consistent shape")
}

fn conv(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) {
    store.insert(format!("{name}.w"), normal(rng, &[3, 3, cin, cout], (2.0 / (9 * cin) as f64).sqrt()));
    store.insert(format!("{name}.b"), DenseArray::zeros(&[cout]));
}

/// Deterministic initialization. Backbone and heads are drawn first so the
/// same seed gives them identical values with or without attention modules.
pub fn init_params(cfg: &DetectorConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c = cfg.channels;
    conv(&mut store, &mut rng, "backbone.stem", cfg.in_channels, cfg.stem_channels);
    conv(&mut store, &mut rng, "backbone.c1", cfg.stem_channels, c);
    for l in 0..cfg.levels {
        conv(&mut store, &mut rng, &format!("backbone.level{l}"), c, c);
    }
    for i in 0..cfg.head_convs {
        conv(&mut store, &mut rng, &format!("cls_tower.{i}"), c, c);
        conv(&mut store, &mut rng, &format!("reg_tower.{i}"), c, c);
    }
    let a = cfg.anchors_per_position();
    let nc = cfg.num_classes;
    store.insert("cls_out.w", normal(&mut rng, &[c, a * nc], 0.01));
    store.insert("cls_out.b", DenseArray::filled(&[a * nc], prior_bias()));
    for i in 0..a {
        store.insert(format!("reg_out.{i}.w"), normal(&mut rng, &[c, 4], 0.01));
        store.insert(format!("reg_out.{i}.b"), DenseArray::zeros(&[4]));
    }
    if cfg.any_bvr() {
        init_point_head(&mut store, "point", c, &mut rng);
    }
    if cfg.cls_bvr {
        AttentionParams::init(&mut store, "cls_bvr", &cfg.relation, &mut rng);
    }
    if cfg.reg_bvr {
        AttentionParams::init(&mut store, "reg_bvr", &cfg.relation, &mut rng);
    }
    Ok(store)
}

#[cfg(test)]
mod tests;
