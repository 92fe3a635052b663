use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use swirl_cli::{commands, config, CliError};

/// Switching inverse reinforcement learning pipelines: simulate the
/// gridworld benchmark, fit model grids, evaluate on held-out data, and
/// segment trajectories into hidden modes.
#[derive(Parser)]
#[command(name = "swirl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker-pool size; defaults to the number of cores. Results are
    /// independent of this setting.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Overrides the command section's output location.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate gridworld demonstrations and the ground-truth model.
    Simulate,
    /// Fit the configured model grid with the multi-seed protocol.
    Fit,
    /// Evaluate fits on held-out data; optionally run the robustness sweep.
    Evaluate,
    /// Infer hidden-mode segments for a data file under a fitted model.
    Segment,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(workers) = cli.workers {
        // a pool may already exist when embedded in tests; that is fine
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
    let config_path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config PATH is required".to_string()))?;
    let mut experiment = config::load(config_path)?;
    if cli.verbose {
        eprintln!("loaded config {}", config_path.display());
    }
    match cli.command {
        Command::Simulate => {
            let mut section = config::require(experiment.simulate.take(), "simulate")?;
            if let Some(output) = cli.output {
                section.output = output;
            }
            commands::simulate::run(&section, config_path)
        }
        Command::Fit => {
            let mut section = config::require(experiment.fit.take(), "fit")?;
            if let Some(output) = cli.output {
                section.output = output;
            }
            commands::fit::run(&section, config_path)
        }
        Command::Evaluate => {
            let mut section = config::require(experiment.evaluate.take(), "evaluate")?;
            if let Some(output) = cli.output {
                section.output = output;
            }
            commands::evaluate::run(&section, config_path)
        }
        Command::Segment => {
            let mut section = config::require(experiment.segment.take(), "segment")?;
            if let Some(output) = cli.output {
                section.output = output;
            }
            commands::segment::run(&section, config_path)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
