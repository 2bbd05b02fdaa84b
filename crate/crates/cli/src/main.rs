use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use advpnml_cli::config::ExperimentConfig;
use advpnml_cli::run;

/// Adversarial robustness lab: train models, wrap them in the per-label
/// refinement defense, and measure accuracy under attack.
#[derive(Parser)]
#[command(name = "advpnml", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as CSV point files.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and save checkpoint plus training log.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint under the config's attack battery.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to model.ckpt in the output dir.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate at several defense strengths and stack the rows.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to model.ckpt in the output dir.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated strengths, e.g. 0.0,0.1,0.3,0.6.
        #[arg(long)]
        strengths: String,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { common } => {
            let cfg = ExperimentConfig::load(&common.config, common.seed)?;
            run::gen_data(&cfg, &common.out)
        }
        Command::Train { common } => {
            let cfg = ExperimentConfig::load(&common.config, common.seed)?;
            run::train_model(&cfg, &common.out).map(|_| ())
        }
        Command::Eval { common, checkpoint } => {
            let cfg = ExperimentConfig::load(&common.config, common.seed)?;
            let ckpt = checkpoint.unwrap_or_else(|| run::checkpoint_path(&common.out));
            run::eval_model(&cfg, &common.out, &ckpt).map(|_| ())
        }
        Command::Sweep { common, checkpoint, strengths } => {
            let cfg = ExperimentConfig::load(&common.config, common.seed)?;
            let ckpt = checkpoint.unwrap_or_else(|| run::checkpoint_path(&common.out));
            let strengths: Vec<f64> = strengths
                .split(',')
                .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad strength {s:?}")))
                .collect::<anyhow::Result<_>>()?;
            run::sweep_strengths(&cfg, &common.out, &ckpt, &strengths).map(|_| ())
        }
    }
}
