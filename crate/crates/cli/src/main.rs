//! `toolkit`: config-driven CKA layer-pruning experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use layerprune::experiment::{self, Experiment};
use layerprune::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    /// Train a net from the config.
    Train,
    /// Iteratively prune a checkpoint (or a freshly trained net).
    Prune,
    /// Report accuracy, FLOPs, robustness, CO2 and latency.
    Eval,
    /// Layer-vs-filter latency at matched neuron counts.
    Latency,
    /// Brute-force oracle ranking against CKA scores.
    Oracle,
}

/// Layer pruning of residual networks by centered kernel alignment.
///
/// Set TOOLKIT_THREADS to cap the threads used for candidate scoring.
#[derive(Debug, Parser)]
#[command(name = "toolkit", version)]
struct Cli {
    command: Command,
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Input checkpoint(s); eval takes unpruned then pruned.
    #[arg(long, num_args = 1..)]
    checkpoint: Vec<PathBuf>,
    /// Output directory, overriding the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed, overriding the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> Result<experiment::Manifest, Error> {
    let exp = Experiment::load(&cli.config, cli.out, cli.seed)?;
    let one = cli.checkpoint.first().map(PathBuf::as_path);
    match cli.command {
        Command::Train => experiment::cmd_train(&exp),
        Command::Prune => experiment::cmd_prune(&exp, one),
        Command::Eval => experiment::cmd_eval(&exp, &cli.checkpoint),
        Command::Latency => experiment::cmd_latency(&exp, &cli.checkpoint),
        Command::Oracle => experiment::cmd_oracle(&exp, one),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let max = match cli.command {
        Command::Train => 0,
        Command::Prune | Command::Latency | Command::Oracle => 1,
        Command::Eval => 2,
    };
    if cli.checkpoint.len() > max {
        eprintln!(
            "error: {:?} takes at most {max} --checkpoint, got {}",
            cli.command,
            cli.checkpoint.len()
        );
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli) {
        Ok(m) => {
            println!("{} files written", m.files.len() + m.measured.len() + 1);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}
