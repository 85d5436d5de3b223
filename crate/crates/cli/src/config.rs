use std::fs;
use std::path::Path;

use bvr_core::detector::{DetectorConfig, InferConfig, QueryMode};
use bvr_core::keypoints::KeySharing;
use bvr_core::relation::GeometryMode;
use bvr_core::synthdata::{val_spec, SceneSpec};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

/// Everything one experiment needs, stored beside every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub detector: DetectorConfig,
    /// Training split scene settings; the validation split derives its seed.
    pub data: SceneSpec,
    pub train_count: usize,
    pub val_count: usize,
    /// Parameter initialization and shuffling seed.
    pub seed: u64,
    pub infer: InferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            detector: DetectorConfig::default(),
            data: SceneSpec::default(),
            train_count: 2000,
            val_count: 500,
            seed: 1,
            infer: InferConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates, reporting the JSON path of the first bad field.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "at `version`: schema version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.detector.validate()?;
        let n = self.detector.image_size;
        if (self.data.height, self.data.width, self.data.channels) != (n, n, self.detector.in_channels) {
            return Err(CliError::Config(format!(
                "scene {}x{}x{} does not match the detector input {n}x{n}x{}",
                self.data.height, self.data.width, self.data.channels, self.detector.in_channels
            )));
        }
        if self.data.classes != self.detector.num_classes {
            return Err(CliError::Config(format!(
                "scene has {} classes, detector {}",
                self.data.classes, self.detector.num_classes
            )));
        }
        self.data.validate(bvr_core::detector::BASE_STRIDE)?;
        Ok(())
    }

    pub fn val_data(&self) -> SceneSpec {
        val_spec(&self.data)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_json().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GeometryArg {
    Direct,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SharingArg {
    Shared,
    PerLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum QueryArg {
    Anchor,
    Center,
}

/// Flag overrides applied on top of the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Ablation {
    #[arg(long)]
    pub no_cls_bvr: bool,
    #[arg(long)]
    pub no_reg_bvr: bool,
    #[arg(long)]
    pub no_appearance: bool,
    #[arg(long)]
    pub no_geometry: bool,
    #[arg(long, value_enum)]
    pub geometry_mode: Option<GeometryArg>,
    #[arg(long)]
    pub no_subpixel: bool,
    #[arg(long, value_enum)]
    pub key_sharing: Option<SharingArg>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum)]
    pub query_mode: Option<QueryArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Ablation {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
        let d = &mut cfg.detector;
        if let Some(g) = self.geometry_mode {
            d.geometry = match g {
                GeometryArg::Direct => GeometryMode::Direct,
                GeometryArg::Shared => GeometryMode::Shared,
            };
        }
        if self.no_cls_bvr {
            d.cls_bvr = false;
        }
        if self.no_reg_bvr {
            d.reg_bvr = false;
        }
        if self.no_appearance {
            d.appearance = false;
        }
        if self.no_geometry {
            d.geometry = GeometryMode::Off;
        }
        if self.no_subpixel {
            d.subpixel = false;
        }
        if let Some(s) = self.key_sharing {
            d.keys.sharing = match s {
                SharingArg::Shared => KeySharing::Shared,
                SharingArg::PerLevel => KeySharing::PerLevel,
            };
        }
        if let Some(k) = self.k {
            d.keys.k = k;
        }
        if let Some(q) = self.query_mode {
            d.query_mode = match q {
                QueryArg::Anchor => QueryMode::Anchor,
                QueryArg::Center => QueryMode::Center,
            };
        }
        if let Some(e) = self.epochs {
            d.optim.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()
    }
}
