//! Command-line front end: synthesis, key-point maps, training, evaluation,
//! prediction and ablation sweeps.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Device, RunConfig, UsageError};

#[derive(Parser, Debug)]
#[command(name = "xbound", version, about = "Boundary-aware transformer lesion segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Dataset root with images/ and masks/.
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// cpu or accelerator.
    #[arg(long, global = true)]
    device: Option<String>,

    /// Model checkpoint for eval and predict (defaults to <out>/best.ckpt).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    /// Directory of predicted mask PNGs to score instead of running a model.
    #[arg(long, global = true)]
    predictions: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate a synthetic lesion dataset.
    Synth,
    /// Write key-point maps and overlays for a directory of masks.
    Keypoints,
    /// Train a model and write checkpoints, a loss log and a validation report.
    Train,
    /// Score a checkpoint or a directory of predicted masks.
    Eval,
    /// Write predicted masks and overlays.
    Predict,
    /// Train every point of an ablation, lambda or block-count grid.
    Sweep,
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for spec in &cli.overrides {
        cfg.apply_override(spec)?;
    }
    if let Some(d) = &cli.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.device {
        cfg.set("device", d)?;
    }
    if let Some(c) = &cli.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    if let Some(p) = &cli.predictions {
        cfg.predictions = Some(p.clone());
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve(cli)?;
    if cfg.device == Device::Accelerator {
        anyhow::bail!("no accelerator backend is available in this build; use --device cpu");
    }
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Keypoints => commands::keypoints(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Predict => commands::predict(&cfg),
        Command::Sweep => commands::sweep(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
