use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use transreid::ablate_cmd::{cmd_ablate, Grid};
use transreid::config::RunConfig;
use transreid::eval_cmd::{cmd_eval, EvalOptions};
use transreid::run::load_data;
use transreid::synth_cmd::cmd_synth;
use transreid::train_cmd::{cmd_train, TrainOptions};

#[derive(Parser)]
#[command(name = "transreid", version, about = "Train and evaluate transformer re-identification models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed (the data seed for `synth`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset on disk.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train, checkpoint and evaluate one model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest; overrides data.manifest and data.synth.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Load a checkpoint whose config hash differs.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on the query/gallery split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Retrieve with the global feature only.
        #[arg(long)]
        global_only: bool,
        #[arg(long)]
        force: bool,
    },
    /// Train every variant of an ablation grid and tabulate the results.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Grid file (TOML) of variant toggles.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.data.synth.seed = seed;
            }
            let summary = cmd_synth(&cfg.data.synth, &common.out)?;
            println!("{summary}");
        }
        Command::Train { common, data, resume, force } => {
            let cfg = load_config(&common)?;
            let ds = load_data(&cfg, data.as_deref())?;
            let opts = TrainOptions { out: common.out, resume, force };
            let outcome = cmd_train(&cfg, &ds, &opts, None)?;
            let r = &outcome.report.retrieval;
            println!("{} steps, mAP {:.4}, R1 {:.4}, checkpoint {}", outcome.steps, r.map, r.rank(1), outcome.final_checkpoint.display());
        }
        Command::Eval { common, data, checkpoint, global_only, force } => {
            let cfg = load_config(&common)?;
            let ds = load_data(&cfg, data.as_deref())?;
            let opts = EvalOptions { out: common.out, checkpoint, global_only, force };
            let report = cmd_eval(&cfg, &ds, &opts)?;
            let r = &report.retrieval;
            println!("mAP {:.4}, R1 {:.4}, feature dim {}, camera gap {:.4}", r.map, r.rank(1), report.feature_dim, report.camera.gap());
        }
        Command::Ablate { common, data, grid } => {
            let cfg = load_config(&common)?;
            let text = match &grid {
                Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading grid {}", p.display()))?,
                None => String::new(),
            };
            let grid = Grid::parse(&cfg, &text)?;
            let ds = load_data(&cfg, data.as_deref())?;
            let ablation = cmd_ablate(&grid, &ds, &common.out)?;
            for r in &ablation.rows {
                println!("{:<20} mAP {:.4} ({:+.4})  R1 {:.4} ({:+.4})", r.variant, r.map, r.delta_map, r.r1, r.delta_r1);
            }
        }
    }
    Ok(())
}
