mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

use config::{parse_config, CommonFlags};

const THREADS_ENV: &str = "PROTO_MARGIN_THREADS";

#[derive(Parser)]
#[command(name = "proto-margin", version, about = "Few-shot prototypical networks with angular-margin heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Episodic training; writes a checkpoint and trace.csv.
    Train {
        #[command(flatten)]
        common: CommonFlags,
        /// Where to write the checkpoint (default <out>/checkpoint.bin).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Test-split evaluation; writes report.json and confusion.csv.
    Eval {
        #[command(flatten)]
        common: CommonFlags,
        /// Checkpoint to evaluate (default <out>/checkpoint.bin).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generates the inline synthetic dataset and writes synthetic.bin.
    Synth {
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Trains and evaluates one AAM model per margin, then tabulates.
    Sweep {
        #[command(flatten)]
        common: CommonFlags,
        /// Comma-separated margins in radians.
        #[arg(long, value_delimiter = ',')]
        margins: Option<Vec<f64>>,
    },
    /// Tabulates existing report.json files.
    Report {
        #[command(flatten)]
        common: CommonFlags,
        reports: Vec<PathBuf>,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = match value.trim().parse() {
        Ok(t) if t > 0 => t,
        _ => bail!("{THREADS_ENV} must be a positive integer, got `{value}`"),
    };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Train { common, checkpoint } => {
            let mut cfg = parse_config(&common)?;
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            commands::train(&cfg)
        }
        Command::Eval { common, checkpoint } => {
            let mut cfg = parse_config(&common)?;
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            commands::eval(&cfg)
        }
        Command::Synth { common } => commands::synth(&parse_config(&common)?),
        Command::Sweep { common, margins } => {
            let mut cfg = parse_config(&common)?;
            if let Some(m) = margins {
                cfg.margins = m;
            }
            commands::sweep(&cfg)
        }
        Command::Report { common, reports } => commands::report(&parse_config(&common)?, &reports),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
