//! `dfas`: synthetic data generation, training, evaluation and artifact
//! rendering for the liveness disentanglement model.
//!
//! Exit codes: 0 success, 2 configuration, 3 I/O or file format,
//! 4 missing artifact, 5 numeric failure.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use run_config::{RunConfig, SEED_ENV};

#[derive(Debug, Parser)]
#[command(name = "dfas", version, about = "Face anti-spoofing by liveness/content disentanglement")]
struct Cli {
    /// Flat key=value run configuration.
    #[arg(short, long, global = true, default_value = "dfas.cfg")]
    config: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic live/spoof dataset.
    GenData,
    /// Pretrain the depth net and save it under the run directory.
    PretrainDepth,
    /// Run the alternating discriminator/generator training loop.
    Train,
    /// Score the threshold and evaluation splits and export features.
    Eval,
    /// Score another dataset with the source dev threshold (HTER).
    CrossEval,
    /// Swap liveness features between live and spoof images.
    Translate {
        #[arg(long)]
        live: Option<PathBuf>,
        #[arg(long)]
        spoof: Option<PathBuf>,
    },
    /// Project exported features to 2-D and draw a scatter plot.
    Plot {
        #[arg(long)]
        features: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> dfas_core::Result<()> {
    let seed = std::env::var(SEED_ENV).ok();
    let cfg = RunConfig::load(&cli.config, seed.as_deref())?;
    print!("{}", cfg.header());
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::PretrainDepth => commands::pretrain(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::CrossEval => commands::cross_eval(&cfg),
        Command::Translate { live, spoof } => commands::translate(&cfg, live.as_deref(), spoof.as_deref()),
        Command::Plot { features } => commands::plot(&cfg, features),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
