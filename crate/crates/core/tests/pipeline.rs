use std::fs;

use bvr_core::detector::{
    evaluate_split, infer, init_params, load_checkpoint, save_checkpoint, train, DetectorConfig, InferConfig, OptimConfig,
};
use bvr_core::keypoints::{KeyBudget, KeySharing};
use bvr_core::relation::RelationConfig;
use bvr_core::synthdata::{generate, load_dir, save_dir, val_spec, validate, SceneSpec};

fn cfg() -> DetectorConfig {
    DetectorConfig {
        image_size: 32,
        stem_channels: 4,
        channels: 8,
        relation: RelationConfig { channels: 8, heads: 2, embed_dim: 8, hidden_dim: 8, map_size: 16, unit_ratio: 0.5 },
        keys: KeyBudget { k: 4, sharing: KeySharing::Shared },
        optim: OptimConfig { epochs: 2, batch_size: 2, warmup_iters: 0, decay_epochs: vec![], ..OptimConfig::default() },
        ..DetectorConfig::default()
    }
}

fn spec() -> SceneSpec {
    SceneSpec { height: 32, width: 32, min_size: 8, max_size: 20, max_objects: 3, seed: 31, ..SceneSpec::default() }
}

#[test]
fn dataset_files_are_byte_identical_and_reload() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ds = generate(&spec(), 5).unwrap();
    save_dir(&ds, a.path()).unwrap();
    save_dir(&generate(&spec(), 5).unwrap(), b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 11);
    for n in &names {
        assert_eq!(fs::read(a.path().join(n)).unwrap(), fs::read(b.path().join(n)).unwrap(), "{n:?}");
    }
    let back = load_dir(a.path()).unwrap();
    assert_eq!(back, ds);
    assert!(validate(&back).is_valid());
}

#[test]
fn truncated_image_file_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    save_dir(&generate(&spec(), 2).unwrap(), dir.path()).unwrap();
    let victim = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "bvra"))
        .unwrap();
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_dir(dir.path()), Err(bvr_core::Error::Format(_))));
}

#[test]
fn train_checkpoint_reload_and_infer() {
    let cfg = cfg();
    let train_set = generate(&spec(), 6).unwrap();
    let val_set = generate(&val_spec(&spec()), 3).unwrap();
    let mut epochs_seen = 0;
    let out = train(&cfg, &train_set, &val_set, 4, |_, _| {
        epochs_seen += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(epochs_seen, 2);
    assert_ne!(out.params, init_params(&cfg, 4).unwrap());

    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &out.params, &cfg, 2, 4).unwrap();
    let (manifest, store) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(manifest.config, cfg);
    let ic = InferConfig::default();
    let (dets, summary) = evaluate_split(&store, &cfg, &val_set, &ic).unwrap();
    assert_eq!(summary, out.final_ap);
    for (d, s) in dets.iter().zip(&val_set.samples) {
        assert_eq!(d, &infer(&store, &cfg, &s.image, &ic).unwrap());
        assert!(d.windows(2).all(|w| w[0].confidence >= w[1].confidence));
        assert!(d.iter().all(|x| x.bbox.x_tl >= 0.0 && x.bbox.x_br <= 32.0 && x.bbox.y_br <= 32.0));
    }
}
