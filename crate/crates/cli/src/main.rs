//! `relgeo` command-line front end.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "relgeo",
    version,
    about = "Siamese camera pose regression: training, evaluation and analyses",
    after_help = "Exit codes: 0 success, 1 configuration error, 2 data error, \
                  3 training divergence or failed gradient check.\n\
                  Log verbosity: RELGEO_LOG=error|warn|info|debug|trace (default warn)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat TOML configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed; replaces the config value.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; replaces the config value.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Set one configuration key, e.g. `--set max_epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and training report.
    Train(Common),
    /// Evaluate a checkpoint or a prediction file on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint; replaces the config value.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Prediction file (`frame_id x y z w p q r` per line); replaces the config value.
        #[arg(long, value_name = "PATH")]
        predictions: Option<PathBuf>,
    },
    /// Train every listed loss combination for several seeds and tabulate test errors.
    Ablate(Common),
    /// Compare descriptor distances of next and random reference pairs.
    PairStats(Common),
    /// Check analytic loss gradients against central finite differences.
    Gradcheck(Common),
    /// Generate a synthetic scene as JSON lines.
    Synth(Common),
}

fn resolve(common: &Common) -> Result<RunConfig, commands::Failure> {
    let mut cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), commands::Failure> {
    match cli.command {
        Command::Train(c) => commands::train_cmd(&resolve(&c)?),
        Command::Evaluate {
            common,
            checkpoint,
            predictions,
        } => {
            let mut cfg = resolve(&common)?;
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            cfg.predictions = predictions.or(cfg.predictions);
            commands::evaluate_cmd(&cfg)
        }
        Command::Ablate(c) => commands::ablate_cmd(&resolve(&c)?),
        Command::PairStats(c) => commands::pair_stats_cmd(&resolve(&c)?),
        Command::Gradcheck(c) => commands::gradcheck_cmd(&resolve(&c)?),
        Command::Synth(c) => commands::synth_cmd(&resolve(&c)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RELGEO_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
