//! `disenhan` — train, evaluate and inspect disentangled heterogeneous
//! graph attention recommenders.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use disenhan::data::Split;
use disenhan::synth::{write_synthetic_dataset, SyntheticSpec};

use commands::{cmd_evaluate, cmd_export_embeddings, cmd_inspect_aspects, cmd_sweep, cmd_train, read_snapshot};
use config::{resolve_out_dir, Overrides, Precision, RunConfig};

#[derive(Parser)]
#[command(name = "disenhan", version, about = "Disentangled heterogeneous graph attention recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted aspects.
    Synth {
        /// Synthetic spec JSON; defaults to the three-aspect benchmark.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write its snapshot and training log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a snapshot under the sampled-negatives ranking protocol.
    Evaluate {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Which split to rank: test or valid.
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average per-relation aspect weights over evaluation targets.
    InspectAspects {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export embeddings for a node list as CSV.
    ExportEmbeddings {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated "type:index" entries, e.g. "user:0,item:3".
        #[arg(long)]
        nodes: String,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train/evaluate across a grid like "K=1,2,5;I=1,3,5;L=1,2".
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        sweep: String,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "test" => Ok(Split::Test),
        "valid" => Ok(Split::Valid),
        other => anyhow::bail!("unknown split {other:?} (use test or valid)"),
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Synth { spec, seed, out } => {
            let out_dir = resolve_out_dir(&out, "synth")?;
            let spec = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .with_context(|| format!("spec not found: {}", path.display()))?;
                    serde_json::from_str::<SyntheticSpec>(&text)
                        .with_context(|| format!("parsing {}", path.display()))?
                }
                None => SyntheticSpec::k3_benchmark(),
            };
            write_synthetic_dataset(&spec, seed, &out_dir)?;
            let resolved = serde_json::json!({ "spec": spec, "seed": seed });
            std::fs::write(
                out_dir.join("resolved_config.json"),
                serde_json::to_string_pretty(&resolved)?,
            )?;
            println!("dataset written to {}", out_dir.display());
            Ok(())
        }
        Command::Train { config, overrides, out } => {
            let out_dir = resolve_out_dir(&out, "train")?;
            let cfg = RunConfig::load(&config, &overrides)?;
            match cfg.precision {
                Precision::F32 => cmd_train::<f32>(&cfg, &out_dir).map(|_| ()),
                Precision::F64 => cmd_train::<f64>(&cfg, &out_dir).map(|_| ()),
            }
        }
        Command::Evaluate { snapshot, config, split, overrides, out } => {
            let out_dir = resolve_out_dir(&out, "evaluate")?;
            let cfg = RunConfig::load(&config, &overrides)?;
            let snap = read_snapshot(&snapshot)?;
            let split = parse_split(&split)?;
            match cfg.precision {
                Precision::F32 => cmd_evaluate::<f32>(&snap, &cfg, split, &out_dir).map(|_| ()),
                Precision::F64 => cmd_evaluate::<f64>(&snap, &cfg, split, &out_dir).map(|_| ()),
            }
        }
        Command::InspectAspects { snapshot, config, overrides, out } => {
            let out_dir = resolve_out_dir(&out, "inspect-aspects")?;
            let cfg = RunConfig::load(&config, &overrides)?;
            let snap = read_snapshot(&snapshot)?;
            match cfg.precision {
                Precision::F32 => cmd_inspect_aspects::<f32>(&snap, &cfg, &out_dir).map(|_| ()),
                Precision::F64 => cmd_inspect_aspects::<f64>(&snap, &cfg, &out_dir).map(|_| ()),
            }
        }
        Command::ExportEmbeddings { snapshot, config, nodes, overrides, out } => {
            let out_dir = resolve_out_dir(&out, "export-embeddings")?;
            let cfg = RunConfig::load(&config, &overrides)?;
            let snap = read_snapshot(&snapshot)?;
            match cfg.precision {
                Precision::F32 => {
                    cmd_export_embeddings::<f32>(&snap, &cfg, &nodes, &out_dir).map(|_| ())
                }
                Precision::F64 => {
                    cmd_export_embeddings::<f64>(&snap, &cfg, &nodes, &out_dir).map(|_| ())
                }
            }
        }
        Command::Sweep { config, sweep, overrides, out } => {
            let out_dir = resolve_out_dir(&out, "sweep")?;
            let cfg = RunConfig::load(&config, &overrides)?;
            match cfg.precision {
                Precision::F32 => cmd_sweep::<f32>(&cfg, &sweep, &out_dir),
                Precision::F64 => cmd_sweep::<f64>(&cfg, &sweep, &out_dir),
            }
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
