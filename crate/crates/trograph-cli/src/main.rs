//! Command line front end for the grasp-synthesis pipeline.
//!
//! Every subcommand is deterministic for a fixed seed: rerunning with the
//! same inputs produces byte-identical output files (bench timing fields
//! are the one documented exception). Exit codes: 0 on success, 1 for
//! runtime failures such as numerical breakdown or training divergence,
//! 2 for bad arguments and malformed inputs.

mod commands;
mod config;
mod records;

use clap::{Args, Parser, Subcommand};
use commands::bench::BenchArgs;
use commands::build_graph::BuildGraphArgs;
use commands::closed_loop::ClosedLoopArgs;
use commands::ik::IkArgs;
use commands::sample::SampleArgs;
use commands::similarity::SimilarityArgs;
use commands::synth::SynthArgs;
use commands::train::TrainArgs;
use config::RunConfig;
use std::path::PathBuf;
use trograph::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "trograph",
    version,
    about = "Grasp synthesis over relative-transform graphs"
)]
struct Cli {
    /// Run configuration file; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override; takes precedence over the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the resolved configuration and seed to stderr before running.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the built-in default configuration to a file.
    InitConfig(InitConfigArgs),
    /// Generate a parametric hand, optionally with a grasp demo dataset.
    Synth(SynthArgs),
    /// Build the relative-transform graph for a hand, object, and grasp.
    BuildGraph(BuildGraphArgs),
    /// Sample grasps with a trained checkpoint or the closed-form oracle.
    Sample(SampleArgs),
    /// Train the denoiser on a demo dataset.
    Train(TrainArgs),
    /// Solve joint values and base pose for link-pose targets.
    Ik(IkArgs),
    /// Score structural similarity between two hands.
    Similarity(SimilarityArgs),
    /// Track a moving object by repeated conditioned sampling.
    ClosedLoop(ClosedLoopArgs),
    /// Run micro-benchmarks and emit a JSON report.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct InitConfigArgs {
    /// Destination for the default configuration.
    #[arg(long)]
    out: PathBuf,
}

/// Exit codes by failure family: singular or diverging numerics are
/// runtime failures, everything else points at the inputs.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NearSingularity(_) | Error::Numerical(_) => 1,
        _ => 2,
    }
}

/// Applies the TROGRAPH_THREADS cap to the global worker pool. A pool that
/// already exists keeps its size; that error is harmless.
fn configure_threads() {
    if let Ok(raw) = std::env::var("TROGRAPH_THREADS") {
        match raw.trim().parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("note: ignoring TROGRAPH_THREADS={raw:?} (want a positive integer)"),
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    }
}

fn dispatch(cli: &Cli, config: &RunConfig, seed: u64) -> Result<i32> {
    match &cli.command {
        Command::InitConfig(args) => {
            RunConfig::default().save(&args.out)?;
            eprintln!("wrote default config to {}", args.out.display());
            Ok(0)
        }
        Command::Synth(args) => commands::synth::run(args, seed).map(|()| 0),
        Command::BuildGraph(args) => commands::build_graph::run(args, config).map(|()| 0),
        Command::Sample(args) => commands::sample::run(args, config, seed).map(|()| 0),
        Command::Train(args) => {
            let diverged = commands::train::run(args, config, seed)?;
            if diverged {
                eprintln!("error: training diverged; trace preserved for inspection");
                Ok(1)
            } else {
                Ok(0)
            }
        }
        Command::Ik(args) => commands::ik::run(args, seed).map(|()| 0),
        Command::Similarity(args) => commands::similarity::run(args).map(|()| 0),
        Command::ClosedLoop(args) => commands::closed_loop::run(args, config, seed).map(|()| 0),
        Command::Bench(args) => commands::bench::run(args, config).map(|()| 0),
    }
}

fn main() {
    let cli = Cli::parse();
    configure_threads();

    let config = match load_config(&cli) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    };
    let seed = cli.seed.unwrap_or(config.seed);
    if cli.verbose {
        eprintln!("seed: {seed}");
        match serde_json::to_string_pretty(&config) {
            Ok(text) => eprintln!("config:\n{text}"),
            Err(e) => eprintln!("config not printable: {e}"),
        }
    }

    match dispatch(&cli, &config, seed) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
