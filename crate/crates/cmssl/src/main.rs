use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cmssl::commands::{
    cmd_finetune, cmd_generate, cmd_grid, cmd_gradcheck, cmd_pretrain, cmd_report, FinetuneArgs, GenerateArgs,
    GradcheckArgs, GridArgs, PretrainArgs,
};
use cmssl::Result;

/// Multi-modal contrastive pre-training experiments.
///
/// Exit codes: 0 success, 2 configuration or validation error, 3 numeric failure.
/// CMSSL_THREADS caps grid worker threads (default 1).
#[derive(Parser)]
#[command(name = "cmssl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (JSON); defaults are used for missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as a manifest plus CMRW files.
    Generate {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contrastively pre-train one encoder per modality.
    Pretrain {
        #[command(flatten)]
        config: ConfigArg,
        /// Comma-separated modality names (default: all).
        #[arg(long, value_delimiter = ',')]
        modalities: Vec<String>,
        /// No augmentations: one raw view per modality (needs two or more modalities).
        #[arg(long)]
        star: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from train_state.json in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Finetune a classifier from a checkpoint or from random weights.
    Finetune {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, required_unless_present = "random_init", conflicts_with = "random_init")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        random_init: bool,
        /// Comma-separated modality names (default: all).
        #[arg(long, value_delimiter = ',')]
        modalities: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the pre-training set × finetuning set grid over several seeds.
    Grid {
        #[command(flatten)]
        config: ConfigArg,
        /// Run seeds 1..=N instead of the configured list.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one op's backward pass (test hook).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Re-render a finished grid and write its per-cell summary.
    Report {
        /// Output directory of a grid run.
        grid_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let out = &mut io::stdout().lock();
    match cli.command {
        Command::Generate { config, seed, out: dir } => {
            cmd_generate(&GenerateArgs { config: config.config, seed, out: dir }, out)?;
        }
        Command::Pretrain { config, modalities, star, seed, out: dir, resume } => {
            cmd_pretrain(&PretrainArgs { config: config.config, modalities, star, seed, out: dir, resume }, out)?;
        }
        Command::Finetune { config, checkpoint, random_init: _, modalities, seed, out: dir } => {
            cmd_finetune(&FinetuneArgs { config: config.config, checkpoint, modalities, seed, out: dir }, out)?;
        }
        Command::Grid { config, seeds, out: dir } => {
            cmd_grid(&GridArgs { config: config.config, seeds, out: dir, threads: None }, out)?;
        }
        Command::Gradcheck { seed, inject_fault } => {
            cmd_gradcheck(&GradcheckArgs { seed, fault: inject_fault }, out)?;
        }
        Command::Report { grid_dir } => {
            cmd_report(&grid_dir, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
