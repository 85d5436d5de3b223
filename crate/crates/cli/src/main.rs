use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bvr_cli::*;
use bvr_core::gradsuite::Scope;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bvr", about = "Toy detector with bridging-representation attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run config JSON; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic train/val splits.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train_count: Option<usize>,
        #[arg(long)]
        val_count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ablation: Ablation,
        /// Directory written by gen-data; splits are generated in memory otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the baseline, the full model and each single-flag ablation.
    Ablations {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-form cost of the geometry term as CSV.
    BenchComplexity {
        /// Sweep JSON with `base`, `sizes` and `queries`.
        #[arg(long)]
        sweep: Option<PathBuf>,
        #[arg(long)]
        validate: bool,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    Gradcheck {
        /// kernels, relation, keypoints, end2end-subset or all.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Print the built-in run config as JSON.
    PrintConfig,
    /// Selected keys on one validation image as JSON.
    DumpKeys {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

fn load(config: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    match config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn epoch_line(m: &bvr_core::detector::EpochMetrics) -> String {
    format!("epoch {} lr {:.5} loss {:.4} AP {:.3} AP50 {:.3}", m.epoch, m.learning_rate, m.loss, m.ap, m.ap50)
}

fn write_single(path: &Path, contents: &str, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Io(format!("{} exists; pass --force to overwrite", path.display())));
    }
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::GenData { common, train_count, val_count, out } => {
            let mut cfg = load(&common.config)?;
            cfg.train_count = train_count.unwrap_or(cfg.train_count);
            cfg.val_count = val_count.unwrap_or(cfg.val_count);
            cmd_gen_data(&cfg, &out, common.force)?;
            println!("wrote {} train and {} val images to {}", cfg.train_count, cfg.val_count, out.display());
        }
        Command::Train { common, ablation, data, out } => {
            let mut cfg = load(&common.config)?;
            ablation.apply(&mut cfg)?;
            eprintln!("{}", describe(&cfg.detector));
            let s = cmd_train(&cfg, data.as_deref(), &out, common.force, |m| eprintln!("{}", epoch_line(m)))?;
            println!("AP {:.4} AP50 {:.4} AP75 {:.4} AP90 {:.4}", s.final_ap.ap, s.final_ap.ap50, s.final_ap.ap75, s.final_ap.ap90);
        }
        Command::Eval { common, checkpoint, data, out } => {
            let cfg = load(&common.config)?;
            let s = cmd_eval(&cfg, &checkpoint, data.as_deref(), &out, common.force)?;
            println!("AP {:.4} AP50 {:.4} AP75 {:.4} AP90 {:.4}", s.ap, s.ap50, s.ap75, s.ap90);
        }
        Command::Ablations { common, epochs, data, out } => {
            let mut cfg = load(&common.config)?;
            if let Some(e) = epochs {
                cfg.detector.optim.epochs = e;
            }
            let rows = cmd_ablations(&cfg, &ablation_grid(), data.as_deref(), &out, common.force, |name, m| {
                eprintln!("[{name}] {}", epoch_line(m))
            })?;
            for r in rows {
                println!("{:<16} AP {:.4} AP50 {:.4}", r.name, r.final_ap.ap, r.final_ap.ap50);
            }
        }
        Command::BenchComplexity { sweep, validate, out, force } => {
            let spec = match &sweep {
                Some(p) => SweepSpec::from_json(
                    &fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?,
                )?,
                None => SweepSpec::default_sweep(),
            };
            let csv = cmd_bench_complexity(&spec, validate)?;
            match out {
                Some(p) => write_single(&p, &csv, force)?,
                None => print!("{csv}"),
            }
        }
        Command::Gradcheck { scope, seed, inject_fault } => {
            let scopes = if scope == "all" {
                Scope::ALL.to_vec()
            } else {
                vec![Scope::from_name(&scope).ok_or_else(|| CliError::Config(format!("unknown scope `{scope}`")))?]
            };
            let fault = inject_fault.as_deref().map(parse_kernel).transpose()?;
            let reports = cmd_gradcheck(&scopes, seed, fault)?;
            print!("{}", gradcheck_report(&reports));
            return Ok(reports.iter().all(|r| r.passed));
        }
        Command::PrintConfig => println!("{}", RunConfig::default().to_json()),
        Command::DumpKeys { config, checkpoint, data, index } => {
            let cfg = load(&config)?;
            let keys = cmd_dump_keys(&cfg, &checkpoint, data.as_deref(), index)?;
            println!("{}", serde_json::to_string_pretty(&keys).expect("keys serialize"));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
