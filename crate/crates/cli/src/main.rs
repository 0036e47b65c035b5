//! Command-line frontend: dataset generation, two-stage training, the
//! video-to-world transform, rendering, evaluation and gradient checking.

use anyhow::Result;
use clap::{Parser, Subcommand};
use splat4d_cli::cmd;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "splat4d",
    version,
    about = "HDR Gaussian-splatting pipeline for monocular alternating-exposure video"
)]
struct Cli {
    /// Worker thread count (default: all cores; also via SPLAT4D_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset tree with oracle priors.
    Generate {
        /// TOML run configuration; omit for the built-in default scene.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset: stage 1 in video space, the video-to-world
    /// transform, then stage 2 with pose refinement.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory produced by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints, logs and the run manifest.
        #[arg(long)]
        out: PathBuf,
        /// Stop after stage 1 (video-space checkpoint only).
        #[arg(long, conflicts_with = "stage2_only")]
        stage1_only: bool,
        /// Skip stage 1 and resume from an existing stage-1 checkpoint.
        #[arg(long, requires = "stage1_checkpoint")]
        stage2_only: bool,
        #[arg(long)]
        stage1_checkpoint: Option<PathBuf>,
    },
    /// Standalone video-to-world transform of a stage-1 checkpoint.
    Transform {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 (video-space) checkpoint.
        #[arg(long)]
        stage1_checkpoint: PathBuf,
        /// Output world-space checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render HDR/LDR images at requested times and exposures.
    Render {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Normalized timestamps in [0, 1]; repeatable.
        #[arg(long = "time")]
        times: Vec<f64>,
        /// Exposure times (novel values allowed); repeatable.
        #[arg(long = "exposure")]
        exposures: Vec<f64>,
    },
    /// Evaluate a trained checkpoint against dataset ground truth.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional JSON report output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run finite-difference gradient checks and report pass/fail.
    Gradcheck {
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run() {
        log::error!("{e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("SPLAT4D_THREADS")
            .ok()
            .and_then(|s| s.parse().ok())
    });
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    match cli.command {
        Command::Generate { config, out } => cmd::generate::run(config.as_deref(), &out),
        Command::Train {
            config,
            data,
            out,
            stage1_only,
            stage2_only,
            stage1_checkpoint,
        } => cmd::train::run(cmd::train::Args {
            config: config.as_deref().map(|p| p.to_path_buf()),
            data,
            out,
            stage1_only,
            stage2_only,
            stage1_checkpoint,
        }),
        Command::Transform {
            config,
            data,
            stage1_checkpoint,
            out,
        } => cmd::transform::run(config.as_deref(), &data, &stage1_checkpoint, &out),
        Command::Render {
            config,
            checkpoint,
            out,
            times,
            exposures,
        } => cmd::render::run(config.as_deref(), &checkpoint, &out, &times, &exposures),
        Command::Eval {
            checkpoint,
            data,
            out,
        } => cmd::eval::run(&checkpoint, &data, out.as_deref()),
        Command::Gradcheck { seed } => cmd::gradcheck::run(seed),
    }
}
