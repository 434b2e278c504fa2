//! Thin command-line front end; all behavior lives in the library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use multimae::cli;

#[derive(Parser)]
#[command(
    name = "multimae",
    about = "Multi-modal masked autoencoding over RGB, depth and semantic segmentation",
    version
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic coupled-modality dataset.
    GenData {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long)]
        num: usize,
        /// Raster side in pixels (multiple of 16).
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        /// Generator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Shapes per scene.
        #[arg(long, default_value_t = 5)]
        shapes: usize,
    },
    /// Pre-train on a dataset.
    Pretrain {
        /// Config file (key=value with [model]/[train] sections); desk
        /// preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the loss log.
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Config overrides, e.g. --set train.seed=7 (repeatable).
        #[arg(long = "set")]
        set: Vec<String>,
        /// Validate and print the schedule, then exit without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Render masked-input / prediction / ground-truth images per modality.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample path prefix: <dir>/<id> of files written by gen-data.
        #[arg(long)]
        sample: PathBuf,
        /// Dirichlet concentration, or `equal` for fixed equal shares.
        #[arg(long, default_value = "1.0")]
        alpha: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Reuse a serialized mask plan (written by a previous run).
        #[arg(long)]
        mask_plan: Option<PathBuf>,
    },
    /// Run invariant suites: grads | mask | losses | export | all.
    Check {
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Export the trunk as a single-modal ViT checkpoint.
    ExportVit {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One of rgb | depth | semseg.
        #[arg(long)]
        modality: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = match args.command {
        Command::GenData {
            out,
            num,
            resolution,
            seed,
            shapes,
        } => cli::cmd_gen_data(&cli::GenDataArgs {
            out,
            num,
            resolution,
            seed,
            shapes,
        }),
        Command::Pretrain {
            config,
            data,
            out,
            resume,
            set,
            dry_run,
        } => cli::cmd_pretrain(&cli::PretrainArgs {
            config,
            data,
            out,
            resume,
            set,
            dry_run,
        }),
        Command::Reconstruct {
            checkpoint,
            sample,
            alpha,
            seed,
            out,
            mask_plan,
        } => cli::cmd_reconstruct(&cli::ReconstructArgs {
            checkpoint,
            sample,
            alpha,
            seed,
            out,
            mask_plan,
        }),
        Command::Check { suite } => cli::cmd_check(&suite),
        Command::ExportVit {
            checkpoint,
            modality,
            out,
        } => cli::cmd_export_vit(&cli::ExportVitArgs {
            checkpoint,
            modality,
            out,
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
