//! `idm`: generate paired synthetic segmentation domains, pretrain a source
//! model, adapt it to a single unlabeled target image, evaluate, and sweep
//! hyperparameters.

mod commands;
mod config;
mod plot;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "idm",
    version,
    about = "One-shot domain adaptation for semantic segmentation"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct GlobalArgs {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the training seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "runs/latest")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the source and shifted target datasets to disk.
    GenData,
    /// Pretrain the source model and write a checkpoint.
    Pretrain,
    /// Adapt a pretrained model to one target image.
    Adapt {
        /// Checkpoint to start from; defaults to `<out-dir>/source.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Target image id from the target pool; seed-picked when omitted.
        #[arg(long)]
        target_id: Option<String>,
    },
    /// Evaluate predictions against ground truth, or a checkpoint against
    /// a labeled dataset directory.
    Eval {
        /// Directory of predicted label maps (flat PNGs or `labels/`).
        #[arg(long, requires = "truth_dir", conflicts_with_all = ["checkpoint", "data_dir"])]
        pred_dir: Option<PathBuf>,
        /// Directory of ground-truth label maps.
        #[arg(long)]
        truth_dir: Option<PathBuf>,
        /// Checkpoint to run over `--data-dir`.
        #[arg(long, requires = "data_dir")]
        checkpoint: Option<PathBuf>,
        /// Labeled dataset directory (images/ + labels/ + manifest.json).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Class count when no dataset manifest is available.
        #[arg(long)]
        num_classes: Option<u8>,
    },
    /// Score one stylized candidate pool and emit the selection CSV.
    Select {
        /// Present for interface compatibility; selection never trains.
        #[arg(long, default_value_t = true)]
        dry_run: bool,
        /// Teacher checkpoint; a freshly initialized model is used when
        /// omitted (records then reflect an untrained teacher).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Candidate pool size.
        #[arg(long, default_value_t = 16)]
        pool: usize,
    },
    /// Write stylized source images for visual inspection.
    Stylize {
        #[arg(long, default_value_t = true)]
        dry_run: bool,
        /// How many source images to stylize.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Write mixed image/label/mask triples for visual inspection. The
    /// target sample's own labels stand in for teacher pseudo labels.
    Mix {
        #[arg(long, default_value_t = true)]
        dry_run: bool,
        /// How many mixed samples to write.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Full experiment: gen-data, pretrain, adapt per seed, evaluate.
    Run,
    /// Write a fully-populated default config file to edit from.
    InitConfig {
        /// Destination path.
        #[arg(long, default_value = "idm.toml")]
        path: PathBuf,
    },
    /// One-factor sweeps and the toggle-ablation grid.
    Sweep,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(err) = dispatch(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.global.config {
        Some(path) => config::ExperimentConfig::load(path)?,
        None => config::ExperimentConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        cfg.train.seed = seed;
        cfg.scene.rng_seed = seed;
    }
    let out_dir = &cli.global.out_dir;

    match cli.command {
        Command::GenData => commands::gen_data(&cfg, out_dir),
        Command::Pretrain => commands::pretrain(&cfg, out_dir),
        Command::Adapt {
            checkpoint,
            target_id,
        } => commands::adapt(&cfg, out_dir, checkpoint.as_deref(), target_id),
        Command::Eval {
            pred_dir,
            truth_dir,
            checkpoint,
            data_dir,
            num_classes,
        } => commands::eval(
            pred_dir.as_deref(),
            truth_dir.as_deref(),
            checkpoint.as_deref(),
            data_dir.as_deref(),
            num_classes,
        ),
        Command::Select {
            dry_run: _,
            checkpoint,
            pool,
        } => commands::select_dry_run(&cfg, out_dir, checkpoint.as_deref(), pool),
        Command::Stylize { dry_run: _, count } => commands::stylize_dry_run(&cfg, out_dir, count),
        Command::Mix { dry_run: _, count } => commands::mix_dry_run(&cfg, out_dir, count),
        Command::Run => commands::run_experiment(&cfg, out_dir),
        Command::InitConfig { path } => {
            config::ExperimentConfig::write_default(&path)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Sweep => commands::sweep(&cfg, out_dir),
    }
}
