//! `advpatch` command-line entry point.
//!
//! Exit codes: 0 on success, 1 when configuration or inputs fail validation
//! (nothing has been computed yet), 2 when a run fails.

mod commands;
mod config;
mod setup;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "advpatch", version, about = "Naturalistic adversarial patches against object detectors")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set attack.lr=0.02`. Applied in
    /// order after the file; the last assignment wins.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory; same as `--set output_dir=DIR`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build filtered train/test manifests from COCO files or a synthetic spec.
    PrepareData,
    /// Train the GAN on the image corpus.
    TrainGan,
    /// Optimise an adversarial patch.
    TrainPatch {
        /// Continue from the last checkpoint of the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score clean, control and patched images.
    Eval {
        /// Patch to evaluate (`.png` or exact `.json`).
        #[arg(long)]
        patch: Option<PathBuf>,
    },
    /// Draw detections on images.
    Render {
        /// Images to render; defaults to the evaluation split.
        #[arg(long = "image")]
        images: Vec<PathBuf>,
        #[arg(long)]
        patch: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let mut overrides = cli.overrides.clone();
    if let Some(out) = &cli.out {
        overrides.push(format!("output_dir={:?}", out.to_string_lossy()));
    }

    let checked = config::resolve(cli.config.as_deref(), &overrides).and_then(|r| {
        match &cli.command {
            Command::PrepareData => commands::check_prepare(&r),
            Command::TrainGan => commands::check_train_gan(&r),
            Command::TrainPatch { .. } => commands::check_train_patch(&r),
            Command::Eval { patch } => commands::check_eval(&r, patch.as_deref()),
            Command::Render { images, patch } => commands::check_render(&r, images, patch.as_deref()),
        }?;
        Ok(r)
    });
    let resolved = match checked {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };

    let outcome = match &cli.command {
        Command::PrepareData => commands::run_prepare(&resolved),
        Command::TrainGan => commands::run_train_gan(&resolved),
        Command::TrainPatch { resume } => commands::run_train_patch(&resolved, *resume),
        Command::Eval { patch } => commands::run_eval(&resolved, patch.as_deref()),
        Command::Render { images, patch } => commands::run_render(&resolved, images, patch.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
