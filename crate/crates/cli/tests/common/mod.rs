#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use bvr_cli::RunConfig;
use bvr_core::detector::{DetectorConfig, OptimConfig};
use bvr_core::keypoints::{KeyBudget, KeySharing};
use bvr_core::relation::RelationConfig;
use bvr_core::synthdata::SceneSpec;

/// A config that trains in well under a second.
pub fn tiny() -> RunConfig {
    RunConfig {
        detector: DetectorConfig {
            image_size: 32,
            stem_channels: 4,
            channels: 8,
            relation: RelationConfig { channels: 8, heads: 2, embed_dim: 8, hidden_dim: 8, map_size: 16, unit_ratio: 0.5 },
            keys: KeyBudget { k: 4, sharing: KeySharing::Shared },
            optim: OptimConfig { epochs: 2, batch_size: 2, warmup_iters: 0, decay_epochs: vec![], ..OptimConfig::default() },
            ..DetectorConfig::default()
        },
        data: SceneSpec { height: 32, width: 32, min_size: 8, max_size: 20, max_objects: 3, ..SceneSpec::default() },
        train_count: 6,
        val_count: 3,
        seed: 5,
        ..RunConfig::default()
    }
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let p = dir.join("run.json");
    std::fs::write(&p, cfg.to_json()).unwrap();
    p
}

pub fn bvr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bvr")).args(args).output().unwrap()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}
