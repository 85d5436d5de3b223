use super::*;
use crate::error::Error;
use crate::geometry::Box;
use crate::numerics::Tape;
use crate::synthdata::{generate, Annotation, Dataset, SceneSpec};

pub(crate) fn tiny() -> DetectorConfig {
    DetectorConfig {
        image_size: 32,
        stem_channels: 4,
        channels: 8,
        relation: RelationConfig { channels: 8, heads: 2, embed_dim: 8, hidden_dim: 8, map_size: 16, unit_ratio: 0.5 },
        keys: KeyBudget { k: 4, sharing: KeySharing::Shared },
        optim: OptimConfig { epochs: 1, batch_size: 2, warmup_iters: 0, decay_epochs: vec![], ..OptimConfig::default() },
        ..DetectorConfig::default()
    }
}

fn tiny_data(n: usize, seed: u64) -> Dataset {
    let spec = SceneSpec { height: 32, width: 32, min_size: 8, max_size: 20, max_objects: 3, seed, ..SceneSpec::default() };
    generate(&spec, n).unwrap()
}

fn outputs(cfg: &DetectorConfig, store: &ParamStore, image: &DenseArray) -> Vec<Vec<u64>> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, store, cfg, image, &BatchMaps::default()).unwrap();
    out.levels
        .iter()
        .flat_map(|l| [l.cls_prob, l.reg])
        .map(|v| tape.value(v).data().iter().map(|x| x.to_bits()).collect())
        .collect()
}

#[test]
fn zero_value_projection_reduces_to_the_vanilla_head() {
    let cfg = tiny();
    let ds = tiny_data(1, 3);
    let base_cfg = DetectorConfig { cls_bvr: false, reg_bvr: false, ..cfg.clone() };
    let base = init_params(&base_cfg, 5).unwrap();
    let mut full = init_params(&cfg, 5).unwrap();
    for name in ["cls_bvr.value", "reg_bvr.value"] {
        full.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let image = &ds.samples[0].image;
    assert_eq!(outputs(&base_cfg, &base, image), outputs(&cfg, &full, image));
}

#[test]
fn key_budget_is_inert_without_attention() {
    let a = DetectorConfig { cls_bvr: false, reg_bvr: false, ..tiny() };
    let mut b = a.clone();
    b.keys = KeyBudget { k: 37, sharing: KeySharing::PerLevel };
    b.subpixel = false;
    b.relation.map_size = 6;
    let store = init_params(&a, 1).unwrap();
    assert_eq!(init_params(&b, 1).unwrap().iter().count(), store.iter().count());
    let ds = tiny_data(1, 4);
    assert_eq!(outputs(&a, &store, &ds.samples[0].image), outputs(&b, &store, &ds.samples[0].image));
}

#[test]
fn center_mode_never_extracts_corners() {
    let ds = tiny_data(1, 2);
    for (mode, expect_corners) in [(QueryMode::Center, false), (QueryMode::Anchor, true)] {
        let cfg = DetectorConfig { query_mode: mode, ..tiny() };
        let store = init_params(&cfg, 0).unwrap();
        let mut tape = Tape::new();
        let out = forward(&mut tape, &store, &cfg, &ds.samples[0].image, &BatchMaps::default()).unwrap();
        assert_eq!(out.stats.corner_extractions > 0, expect_corners, "{mode:?}");
    }
}

#[test]
fn batch_maps_match_inline_maps() {
    let cfg = tiny();
    let store = init_params(&cfg, 9).unwrap();
    let ds = tiny_data(1, 9);
    let mut bt = Tape::new();
    let (maps, vars) = BatchMaps::build(&mut bt, &store, &cfg).unwrap();
    assert_eq!(vars.len(), 2);
    let mut t1 = Tape::new();
    let a = forward(&mut t1, &store, &cfg, &ds.samples[0].image, &maps).unwrap();
    let mut t2 = Tape::new();
    let b = forward(&mut t2, &store, &cfg, &ds.samples[0].image, &BatchMaps::default()).unwrap();
    for (x, y) in a.levels.iter().zip(&b.levels) {
        assert_eq!(t1.value(x.reg).data(), t2.value(y.reg).data());
        assert_eq!(t1.value(x.cls_prob).data(), t2.value(y.cls_prob).data());
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut cfg = tiny();
    cfg.optim.learning_rate = 0.0;
    let ds = tiny_data(4, 1);
    let out = train(&cfg, &ds, &tiny_data(2, 2), 3, |_, _| Ok(())).unwrap();
    let init = init_params(&cfg, 3).unwrap();
    for (name, p) in init.iter() {
        assert_eq!(out.params.get(name).unwrap(), p, "{name}");
    }
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny();
    let ds = tiny_data(4, 6);
    let val = tiny_data(2, 7);
    let a = train(&cfg, &ds, &val, 11, |_, _| Ok(())).unwrap();
    let b = train(&cfg, &ds, &val, 11, |_, _| Ok(())).unwrap();
    assert_eq!(serde_json::to_string(&a.metrics).unwrap(), serde_json::to_string(&b.metrics).unwrap());
    assert_eq!(a.params, b.params);
}

fn mean_loss(cfg: &DetectorConfig, store: &ParamStore, ds: &Dataset) -> f64 {
    ds.samples
        .iter()
        .map(|s| {
            let mut tape = Tape::new();
            let (_, l) = image_loss(&mut tape, store, cfg, s, &BatchMaps::default()).unwrap();
            tape.value(l.total).item().unwrap()
        })
        .sum::<f64>()
        / ds.samples.len() as f64
}

#[test]
fn one_epoch_reduces_the_loss() {
    let mut cfg = tiny();
    cfg.optim.batch_size = 1;
    let ds = tiny_data(10, 12);
    let before = mean_loss(&cfg, &init_params(&cfg, 4).unwrap(), &ds);
    let out = train(&cfg, &ds, &tiny_data(1, 13), 4, |_, _| Ok(())).unwrap();
    let after = mean_loss(&cfg, &out.params, &ds);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn loss_after_one_step_is_pinned() {
    let mut cfg = tiny();
    cfg.optim.batch_size = 2;
    let ds = tiny_data(2, 21);
    let out = train(&cfg, &ds, &tiny_data(1, 22), 8, |_, _| Ok(())).unwrap();
    let after = mean_loss(&cfg, &out.params, &ds);
    assert!((after - PINNED_LOSS_AFTER_STEP).abs() < 1e-9, "{after:.17}");
}

const PINNED_LOSS_AFTER_STEP: f64 = 1.750_854_612_435_543_5;

#[test]
fn crafted_regression_recovers_the_box() {
    let cfg = DetectorConfig { cls_bvr: false, reg_bvr: false, ..tiny() };
    let specs = cfg.level_specs();
    let anchors = build_anchors(&specs, &cfg.anchor_scales, &cfg.anchor_ratios).unwrap();
    let gt = Box::new(5.3, 7.9, 19.1, 16.4).unwrap();
    let (l, pos, ai) = (0usize, 10usize, 2usize);
    let a = cfg.anchors_per_position();
    let nc = cfg.num_classes;
    let mut tape = Tape::new();
    let mut levels = Vec::new();
    for (li, spec) in specs.iter().enumerate() {
        let hw = spec.bins();
        let mut probs = vec![0.0; hw * a * nc];
        let mut reg = vec![0.0; hw * a * 4];
        if li == l {
            probs[(pos * a + ai) * nc + 1] = 0.9;
            let d = encode_delta(&gt, &anchors[l][pos * a + ai]);
            let row = ai * hw + pos;
            reg[row * 4..row * 4 + 4].copy_from_slice(&d);
        }
        let cls_prob = tape.constant(DenseArray::new(vec![hw, a * nc], probs).unwrap());
        let reg = tape.constant(DenseArray::new(vec![hw * a, 4], reg).unwrap());
        levels.push(LevelOutput { spec: *spec, cls_prob, reg });
    }
    let out = ForwardOutput { levels, points: vec![], keys: None, stats: ForwardStats::default() };
    let dets = decode_detections(&tape, &out, &cfg, &InferConfig::default()).unwrap();
    assert_eq!(dets.len(), 1);
    assert_eq!(dets[0].class, 1);
    let b = dets[0].bbox;
    for (p, q) in [(b.x_tl, gt.x_tl), (b.y_tl, gt.y_tl), (b.x_br, gt.x_br), (b.y_br, gt.y_br)] {
        assert!((p - q).abs() < 0.5);
    }
}

#[test]
fn untrained_detector_emits_nothing_above_a_high_threshold() {
    let cfg = tiny();
    let store = init_params(&cfg, 0).unwrap();
    let ds = tiny_data(1, 0);
    let ic = InferConfig { score_threshold: 0.5, ..InferConfig::default() };
    assert!(infer(&store, &cfg, &ds.samples[0].image, &ic).unwrap().is_empty());
}

#[test]
fn non_finite_input_is_reported() {
    let cfg = tiny();
    let store = init_params(&cfg, 0).unwrap();
    let mut image = tiny_data(1, 0).samples[0].image.clone();
    image.data_mut()[17] = f64::NAN;
    let mut tape = Tape::new();
    let err = forward(&mut tape, &store, &cfg, &image, &BatchMaps::default()).unwrap_err();
    assert!(matches!(err, Error::Numeric { .. }), "{err}");
}

#[test]
fn out_of_range_class_is_a_config_error() {
    let cfg = tiny();
    let store = init_params(&cfg, 0).unwrap();
    let mut s = tiny_data(1, 0).samples[0].clone();
    s.annotation = Annotation { boxes: vec![Box::new(1.0, 1.0, 12.0, 12.0).unwrap()], classes: vec![3] };
    let mut tape = Tape::new();
    assert!(matches!(image_loss(&mut tape, &store, &cfg, &s, &BatchMaps::default()), Err(Error::Config(_))));
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny();
    let store = init_params(&cfg, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &store, &cfg, 3, 2).unwrap();
    let (m, loaded) = load_checkpoint(dir.path()).unwrap();
    assert_eq!((m.epoch, m.seed, &m.config), (3, 2, &cfg));
    assert_eq!(loaded, store);
    std::fs::remove_file(dir.path().join("cls_out.b.bvra")).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
}
