//! `mbt`: data generation, training, evaluation and analysis runs.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "mbt", version, about = "Multimodal bottleneck transformer toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Named defaults: tiny, desk or paper.
    #[arg(long, global = true, default_value = "desk")]
    pub preset: String,
    /// TOML run config (a previous manifest works).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; relative paths resolve under MBT_OUTPUT_ROOT when set.
    #[arg(long, global = true, default_value = "runs/latest")]
    pub out: PathBuf,
    #[arg(long, global = true, env = "MBT_OUTPUT_ROOT", hide_env_values = true)]
    pub output_root: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Synthetic task: pair-sum, visual-only or audio-only.
    #[arg(long, global = true)]
    pub task: Option<String>,
    /// Dotted-key override such as `model.fusion_layer=2`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic audiovisual dataset (train and test splits).
    GenData,
    /// Tokenize a dataset and report patch shapes.
    Tokenize {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a model; generates synthetic data when --data is absent.
    Train {
        /// Directory holding `train/` and `test/` splits from gen-data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a saved model with multi-crop inference.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// A dataset split directory.
        #[arg(long)]
        data: PathBuf,
    },
    /// Closed-form compute counts.
    Flops {
        /// `Lf=a..b` (inclusive) sweeps the fusion layer for both strategies.
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Attention-rollout saliency of one clip.
    Rollout {
        #[arg(long)]
        model: Option<PathBuf>,
        /// A dataset split directory; a synthetic clip is rendered otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Cross-modal reachability certificate, optionally Jacobian-probed.
    Reach {
        #[arg(long)]
        probe: bool,
    },
    /// Finite-difference check of every primitive and the model loss.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
