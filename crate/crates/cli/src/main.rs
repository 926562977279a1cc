//! `kswap`: generate data, pretrain, run stage sequences, evaluate and
//! compare checkpoints.
//!
//! Exit codes: 0 ok, 2 configuration, 3 pretraining gate, 4 missing or
//! corrupt input, 5 incompatible inputs.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;
use failure::Failure;

#[derive(Parser)]
#[command(name = "kswap", version, about = "Knowledge-swapping experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, replacing the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace one seed: model, data, lora, epochs or all.
    #[arg(long = "seed-override", value_name = "KEY=VALUE")]
    seed_override: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic datasets.
    GenData(Common),
    /// Train the base model and write its checkpoint and Start row.
    Pretrain(Common),
    /// Run every configured plan from the base model.
    Run(Common),
    /// Evaluate a checkpoint on the configured task.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-layer weight distance between two checkpoints.
    Diagnose {
        #[command(flatten)]
        common: Common,
        a: PathBuf,
        b: PathBuf,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for spec in &common.seed_override {
        cfg.override_seed(spec)?;
    }
    if let Some(out) = &common.out {
        cfg.output_dir.clone_from(out);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(c) => commands::gen_data(&load(&c)?),
        Command::Pretrain(c) => commands::pretrain_cmd(&load(&c)?),
        Command::Run(c) => commands::run_cmd(&load(&c)?),
        Command::Eval { common, checkpoint } => commands::eval_cmd(&load(&common)?, &checkpoint),
        Command::Diagnose { common, a, b } => {
            let out = match (&common.out, &common.config) {
                (Some(out), _) => out.clone(),
                (None, Some(_)) => load(&common)?.output_dir,
                (None, None) => PathBuf::from("."),
            };
            commands::diagnose_cmd(&a, &b, &out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
