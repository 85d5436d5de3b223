use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

use super::{init_params, DetectorConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: DetectorConfig,
    pub epoch: usize,
    pub seed: u64,
    pub params: Vec<String>,
}

/// Writes `manifest.json` and one `.bvra` file per parameter into `dir`.
pub fn save_checkpoint(dir: &Path, store: &ParamStore, config: &DetectorConfig, epoch: usize, seed: u64) -> Result<()> {
    store.save_dir(dir)?;
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        epoch,
        seed,
        params: store.iter().map(|(n, _)| n.clone()).collect(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a checkpoint and checks that its parameters are exactly those the
/// stored config expects, with matching shapes.
pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, ParamStore)> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    let store = ParamStore::load_dir(dir, &manifest.params)?;
    let expected = init_params(&manifest.config, 0)?;
    for (name, a) in expected.iter() {
        match store.get(name) {
            Some(b) if b.shape() == a.shape() => {}
            Some(b) => {
                return Err(Error::Format(format!("parameter `{name}` has shape {:?}, expected {:?}", b.shape(), a.shape())))
            }
            None => return Err(Error::Format(format!("checkpoint is missing parameter `{name}`"))),
        }
    }
    if store.len() != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, the config expects {}",
            store.len(),
            expected.len()
        )));
    }
    Ok((manifest, store))
}
