use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bvr_core::complexity::{to_csv, validate_against_counter, CostMode, CostQuery, CostReport, CSV_HEADER};
use bvr_core::detector::{
    evaluate_split, forward, load_checkpoint, save_checkpoint, train, ApSummary, BatchMaps, DetectorConfig,
    EpochMetrics,
};
use bvr_core::geometry::PointKind;
use bvr_core::gradsuite::{run_scope, Scope, ScopeReport};
use bvr_core::numerics::{Kernel, Tape};
use bvr_core::synthdata::{self, generate, load_dir, save_dir, Dataset};
use bvr_core::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{hex, Ablation, CliError, RunConfig};

pub const TRAIN_DIR: &str = "train";
pub const VAL_DIR: &str = "val";
pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const AP_SUMMARY_FILE: &str = "ap_summary.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const ABLATION_FILE: &str = "ablations.csv";

/// Links a run directory's config hash to every file it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

/// Creates `out`, refusing to touch a non-empty directory unless `force`.
pub fn prepare_out_dir(out: &Path, force: bool) -> Result<(), CliError> {
    if out.exists() {
        if !out.is_dir() {
            return Err(CliError::Io(format!("{} exists and is not a directory", out.display())));
        }
        let non_empty = fs::read_dir(out).map_err(io_at(out))?.next().is_some();
        if non_empty {
            if !force {
                return Err(CliError::Io(format!("{} is not empty; pass --force to overwrite", out.display())));
            }
            fs::remove_dir_all(out).map_err(io_at(out))?;
        }
    }
    fs::create_dir_all(out).map_err(io_at(out))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_at(path))
}

fn files_under(root: &Path, dir: &Path, acc: &mut Vec<PathBuf>) -> Result<(), CliError> {
    for entry in fs::read_dir(dir).map_err(io_at(dir))? {
        let path = entry.map_err(io_at(dir))?.path();
        if path.is_dir() {
            files_under(root, &path, acc)?;
        } else {
            acc.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// Hashes every file in `out` (sorted by path) into `manifest.json`.
fn write_manifest(out: &Path, command: &str, cfg: &RunConfig) -> Result<RunManifest, CliError> {
    let mut paths = Vec::new();
    files_under(out, out, &mut paths)?;
    paths.retain(|p| p != Path::new(MANIFEST_FILE));
    paths.sort();
    let mut artifacts = Vec::with_capacity(paths.len());
    for p in paths {
        let full = out.join(&p);
        let bytes = fs::read(&full).map_err(io_at(&full))?;
        let path = p.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        artifacts.push(Artifact { path, sha256: hex(&Sha256::digest(&bytes)) });
    }
    let m = RunManifest { command: command.to_string(), config_hash: cfg.hash(), artifacts };
    write(&out.join(MANIFEST_FILE), serde_json::to_string_pretty(&m).expect("manifest serializes"))?;
    Ok(m)
}

fn check_dataset(ds: &Dataset, cfg: &RunConfig, what: &str) -> Result<(), CliError> {
    synthdata::validate(ds).into_result().map_err(|e| CliError::Config(format!("{what}: {e}")))?;
    let d = &cfg.detector;
    if (ds.spec.height, ds.spec.width, ds.spec.channels) != (d.image_size, d.image_size, d.in_channels)
        || ds.spec.classes != d.num_classes
    {
        return Err(CliError::Config(format!(
            "{what}: {}x{}x{} images with {} classes do not fit the detector",
            ds.spec.height, ds.spec.width, ds.spec.channels, ds.spec.classes
        )));
    }
    if ds.samples.is_empty() {
        return Err(CliError::Config(format!("{what}: dataset is empty")));
    }
    Ok(())
}

fn load_split(dir: &Path, cfg: &RunConfig, what: &str) -> Result<Dataset, CliError> {
    let ds = load_dir(dir).map_err(|e| match e {
        Error::Io(io) => CliError::Io(format!("{}: {io}", dir.display())),
        other => other.into(),
    })?;
    check_dataset(&ds, cfg, what)?;
    Ok(ds)
}

/// Train and validation splits, read from `data` or generated from the config.
pub fn datasets(cfg: &RunConfig, data: Option<&Path>) -> Result<(Dataset, Dataset), CliError> {
    match data {
        Some(dir) => Ok((load_split(&dir.join(TRAIN_DIR), cfg, "train split")?, load_split(&dir.join(VAL_DIR), cfg, "val split")?)),
        None => {
            let train = generate(&cfg.data, cfg.train_count)?;
            let val = generate(&cfg.val_data(), cfg.val_count)?;
            check_dataset(&train, cfg, "train split")?;
            check_dataset(&val, cfg, "val split")?;
            Ok((train, val))
        }
    }
}

/// Writes `out/train`, `out/val`, the config snapshot and the manifest.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<RunManifest, CliError> {
    cfg.validate()?;
    let train = generate(&cfg.data, cfg.train_count)?;
    let val = generate(&cfg.val_data(), cfg.val_count)?;
    synthdata::validate(&train).into_result()?;
    synthdata::validate(&val).into_result()?;
    prepare_out_dir(out, force)?;
    save_dir(&train, &out.join(TRAIN_DIR))?;
    save_dir(&val, &out.join(VAL_DIR))?;
    write(&out.join(CONFIG_FILE), cfg.to_json())?;
    write_manifest(out, "gen-data", cfg)
}

pub fn ap_csv_header() -> &'static str {
    "epoch,ap,ap50,ap75,ap90"
}

fn ap_row(label: &str, s: &ApSummary) -> String {
    format!("{label},{:.6},{:.6},{:.6},{:.6}", s.ap, s.ap50, s.ap75, s.ap90)
}

fn summary_of(m: &EpochMetrics) -> ApSummary {
    ApSummary { ap: m.ap, ap50: m.ap50, ap75: m.ap75, ap90: m.ap90, per_threshold: Vec::new() }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub metrics: Vec<EpochMetrics>,
    pub final_ap: ApSummary,
    pub manifest: RunManifest,
}

/// Trains, evaluating after every epoch, and writes metrics, curves, the
/// final checkpoint and the manifest. `log` receives one line per epoch.
pub fn cmd_train_with(
    cfg: &RunConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    out: &Path,
    force: bool,
    mut log: impl FnMut(&EpochMetrics),
) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    check_dataset(train_set, cfg, "train split")?;
    check_dataset(val_set, cfg, "val split")?;
    prepare_out_dir(out, force)?;
    write(&out.join(CONFIG_FILE), cfg.to_json())?;
    let mut metrics_lines = String::new();
    let outcome = train(&cfg.detector, train_set, val_set, cfg.seed, |m, _| {
        log(m);
        metrics_lines.push_str(&serde_json::to_string(m)?);
        metrics_lines.push('\n');
        Ok(())
    })?;
    write(&out.join(METRICS_FILE), &metrics_lines)?;

    let mut curve = String::from("epoch,iteration,loss\n");
    let mut iteration = 0usize;
    for m in &outcome.metrics {
        for l in &m.iteration_losses {
            writeln!(curve, "{},{iteration},{l:.9}", m.epoch).unwrap();
            iteration += 1;
        }
    }
    write(&out.join(LOSS_CURVE_FILE), curve)?;

    let mut ap = format!("{}\n", ap_csv_header());
    for m in &outcome.metrics {
        writeln!(ap, "{}", ap_row(&m.epoch.to_string(), &summary_of(m))).unwrap();
    }
    write(&out.join(AP_SUMMARY_FILE), ap)?;

    let epochs = outcome.metrics.last().map_or(0, |m| m.epoch + 1);
    save_checkpoint(&out.join(CHECKPOINT_DIR), &outcome.params, &cfg.detector, epochs, cfg.seed)?;
    let manifest = write_manifest(out, "train", cfg)?;
    Ok(TrainSummary { metrics: outcome.metrics, final_ap: outcome.final_ap, manifest })
}

pub fn cmd_train(
    cfg: &RunConfig,
    data: Option<&Path>,
    out: &Path,
    force: bool,
    log: impl FnMut(&EpochMetrics),
) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let (train_set, val_set) = datasets(cfg, data)?;
    cmd_train_with(cfg, &train_set, &val_set, out, force, log)
}

/// The run config with the detector taken from a checkpoint.
fn with_checkpoint(cfg: &RunConfig, checkpoint: &Path) -> Result<(RunConfig, bvr_core::numerics::ParamStore), CliError> {
    let (manifest, store) = load_checkpoint(checkpoint).map_err(|e| match e {
        Error::Io(io) => CliError::Io(format!("{}: {io}", checkpoint.display())),
        other => other.into(),
    })?;
    let run = RunConfig { detector: manifest.config, ..cfg.clone() };
    run.validate()?;
    Ok((run, store))
}

/// Evaluates a checkpoint on the validation split.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<ApSummary, CliError> {
    let (run, store) = with_checkpoint(cfg, checkpoint)?;
    let val = match data {
        Some(dir) => load_split(&dir.join(VAL_DIR), &run, "val split")?,
        None => {
            let val = generate(&run.val_data(), run.val_count)?;
            check_dataset(&val, &run, "val split")?;
            val
        }
    };
    let (dets, summary) = evaluate_split(&store, &run.detector, &val, &run.infer)?;
    prepare_out_dir(out, force)?;
    write(&out.join(CONFIG_FILE), run.to_json())?;
    write(&out.join(AP_SUMMARY_FILE), format!("{}\n{}\n", ap_csv_header(), ap_row("final", &summary)))?;
    let mut per = String::from("iou,ap\n");
    for (t, v) in bvr_core::detector::AP_THRESHOLDS.iter().zip(&summary.per_threshold) {
        writeln!(per, "{t:.2},{v:.6}").unwrap();
    }
    write(&out.join("ap_per_threshold.csv"), per)?;
    let mut lines = String::new();
    for (i, d) in dets.iter().enumerate() {
        lines.push_str(&serde_json::to_string(&serde_json::json!({ "image": i, "detections": d })).expect("serializes"));
        lines.push('\n');
    }
    write(&out.join("detections.jsonl"), lines)?;
    write_manifest(out, "eval", &run)?;
    Ok(summary)
}

/// Rows of a complexity sweep: explicit queries, then `sizes` applied to `base`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub base: Option<CostQuery>,
    pub sizes: Vec<[u64; 2]>,
    pub queries: Vec<CostQuery>,
}

impl SweepSpec {
    pub fn default_sweep() -> Self {
        Self { base: None, sizes: [25, 50, 100, 150, 200, 400].iter().map(|&s| [s, s]).collect(), queries: Vec::new() }
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("at `{path}`: {}", e.into_inner()))
        })
    }

    pub fn rows(&self) -> Result<Vec<CostQuery>, CliError> {
        let base = self.base.unwrap_or_else(|| CostQuery::paper_defaults(0, 0));
        let mut rows = self.queries.clone();
        rows.extend(self.sizes.iter().map(|&[h, w]| CostQuery { h, w, ..base }));
        for q in &rows {
            if [q.d0, q.d1, q.g, q.k, q.h, q.w, q.m].contains(&0) {
                return Err(CliError::Config(format!("sweep row has a zero extent: {q:?}")));
            }
        }
        Ok(rows)
    }
}

/// Outcome of cross-checking one row against the instrumented kernels.
pub fn validation_status(q: &CostQuery, seed: u64) -> &'static str {
    let mut status = "match";
    for mode in [CostMode::Direct, CostMode::Shared] {
        match validate_against_counter(q, mode, seed) {
            Ok(_) => {}
            Err(Error::Config(_)) => return "skipped",
            Err(_) => status = "mismatch",
        }
    }
    status
}

/// CSV of the sweep. With `validate`, a trailing `validation` column holds
/// `match`, `mismatch`, or `skipped` for rows too large to instrument.
pub fn cmd_bench_complexity(sweep: &SweepSpec, validate: bool) -> Result<String, CliError> {
    let reports: Vec<CostReport> = sweep.rows()?.into_iter().map(CostReport::new).collect();
    if !validate {
        return Ok(to_csv(&reports));
    }
    let mut s = format!("{CSV_HEADER},validation\n");
    for r in &reports {
        let row = bvr_core::complexity::csv_row(r);
        writeln!(s, "{row},{}", validation_status(&r.query, 0)).unwrap();
    }
    Ok(s)
}

pub fn cmd_gradcheck(scopes: &[Scope], seed: u64, fault: Option<Kernel>) -> Result<Vec<ScopeReport>, CliError> {
    scopes.iter().map(|&s| run_scope(s, seed, fault).map_err(CliError::from)).collect()
}

pub fn gradcheck_report(reports: &[ScopeReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        writeln!(s, "{verdict} {} seed={} worst={:.3e} tolerance={:.0e}", r.scope.name(), r.seed, r.worst, r.tolerance)
            .unwrap();
        for name in r.failing() {
            writeln!(s, "  failing: {name}").unwrap();
        }
    }
    s
}

pub fn parse_kernel(name: &str) -> Result<Kernel, CliError> {
    Kernel::ALL
        .iter()
        .copied()
        .find(|k| k.name() == name)
        .ok_or_else(|| CliError::Config(format!("unknown kernel `{name}`")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpedKey {
    pub kind: PointKind,
    pub level: usize,
    pub score: f64,
    pub x: f64,
    pub y: f64,
}

/// Keys the checkpoint selects on validation image `index`. Empty when
/// attention is off.
pub fn cmd_dump_keys(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: Option<&Path>,
    index: usize,
) -> Result<Vec<DumpedKey>, CliError> {
    let (run, store) = with_checkpoint(cfg, checkpoint)?;
    let image = match data {
        Some(dir) => {
            let val = load_split(&dir.join(VAL_DIR), &run, "val split")?;
            val.samples
                .get(index)
                .ok_or_else(|| CliError::Config(format!("image {index} is out of range ({} images)", val.samples.len())))?
                .image
                .clone()
        }
        None => {
            if index >= run.val_count {
                return Err(CliError::Config(format!("image {index} is out of range ({} images)", run.val_count)));
            }
            synthdata::render_one(&run.val_data(), index).image
        }
    };
    let mut tape = Tape::new();
    let out = forward(&mut tape, &store, &run.detector, &image, &BatchMaps::default())?;
    Ok(out
        .keys
        .iter()
        .flatten()
        .flat_map(|set| &set.records)
        .map(|r| DumpedKey { kind: r.kind, level: r.level, score: r.score, x: r.x, y: r.y })
        .collect())
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub flags: &'static str,
    pub final_ap: ApSummary,
}

/// Baseline, the full model, and one row per single-flag ablation.
pub fn ablation_grid() -> Vec<(&'static str, &'static str, Ablation)> {
    let off = Ablation::default();
    vec![
        ("baseline", "--no-cls-bvr --no-reg-bvr", Ablation { no_cls_bvr: true, no_reg_bvr: true, ..off.clone() }),
        ("full", "", off.clone()),
        ("no-cls-bvr", "--no-cls-bvr", Ablation { no_cls_bvr: true, ..off.clone() }),
        ("no-reg-bvr", "--no-reg-bvr", Ablation { no_reg_bvr: true, ..off.clone() }),
        ("no-appearance", "--no-appearance", Ablation { no_appearance: true, ..off.clone() }),
        ("no-geometry", "--no-geometry", Ablation { no_geometry: true, ..off.clone() }),
        ("no-subpixel", "--no-subpixel", Ablation { no_subpixel: true, ..off.clone() }),
        (
            "per-level-keys",
            "--key-sharing per-level",
            Ablation { key_sharing: Some(crate::SharingArg::PerLevel), ..off },
        ),
    ]
}

/// Trains every entry of `grid` on the same data, each in `out/<name>`, and
/// writes `out/ablations.csv`.
pub fn cmd_ablations(
    cfg: &RunConfig,
    grid: &[(&'static str, &'static str, Ablation)],
    data: Option<&Path>,
    out: &Path,
    force: bool,
    mut log: impl FnMut(&str, &EpochMetrics),
) -> Result<Vec<AblationRow>, CliError> {
    cfg.validate()?;
    let mut configs = Vec::with_capacity(grid.len());
    for (name, flags, ab) in grid {
        let mut c = cfg.clone();
        ab.apply(&mut c)?;
        configs.push((*name, *flags, c));
    }
    let (train_set, val_set) = datasets(cfg, data)?;
    prepare_out_dir(out, force)?;
    write(&out.join(CONFIG_FILE), cfg.to_json())?;
    let mut rows = Vec::new();
    let mut csv = String::from("name,flags,ap,ap50,ap75,ap90\n");
    for (name, flags, c) in configs {
        let s = cmd_train_with(&c, &train_set, &val_set, &out.join(name), false, |m| log(name, m))?;
        let a = &s.final_ap;
        writeln!(csv, "{name},{flags},{:.6},{:.6},{:.6},{:.6}", a.ap, a.ap50, a.ap75, a.ap90).unwrap();
        rows.push(AblationRow { name, flags, final_ap: s.final_ap });
    }
    write(&out.join(ABLATION_FILE), csv)?;
    write_manifest(out, "ablations", cfg)?;
    Ok(rows)
}

/// The detector config a flag set produces, for display.
pub fn describe(cfg: &DetectorConfig) -> String {
    format!(
        "cls_bvr={} reg_bvr={} appearance={} geometry={:?} subpixel={} keys={:?}/{} query={:?}",
        cfg.cls_bvr, cfg.reg_bvr, cfg.appearance, cfg.geometry, cfg.subpixel, cfg.keys.sharing, cfg.keys.k, cfg.query_mode
    )
}
