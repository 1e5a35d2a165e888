//! Experiment runner for the steinlab library.
//!
//! One experiment per invocation: the subcommand picks the experiment,
//! `--config` points at the JSON experiment file, `--out` and `--seed`
//! override the config's output directory and RNG seed. On failure a
//! machine-readable error JSON is printed to stderr and the process exits
//! with a class-specific code.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use steinlab::cli::{run, ExperimentConfig, ExperimentKind};
use steinlab::Error;

#[derive(Parser)]
#[command(
    name = "steinlab",
    version,
    about = "Stein variational gradient descent: dynamics, diagnostics and identity checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct CommonArgs {
    /// Path to the experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Deterministic particle run.
    RunOde(CommonArgs),
    /// Stochastic run with kernel-correlated noise.
    RunSde(CommonArgs),
    /// Tilted deterministic run.
    RunTilted(CommonArgs),
    /// Kernelised Stein discrepancy of an ensemble.
    Ksd(CommonArgs),
    /// Trajectory rate-functional evaluation.
    Rate(CommonArgs),
    /// Kernel comparison sweep (and optional fixed-point table).
    Compare(CommonArgs),
    /// Density-level identity battery on a 1-D grid.
    ContinuumIdentities(CommonArgs),
    /// Two-kernel fixed-point scatter plots for a 2-D standard normal.
    ReproduceFig1(CommonArgs),
    /// Validate a config and print its diagnostics.
    Validate(CommonArgs),
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::RunOde(a)
            | Command::RunSde(a)
            | Command::RunTilted(a)
            | Command::Ksd(a)
            | Command::Rate(a)
            | Command::Compare(a)
            | Command::ContinuumIdentities(a)
            | Command::ReproduceFig1(a)
            | Command::Validate(a) => a,
        }
    }

    fn experiment(&self) -> Option<ExperimentKind> {
        match self {
            Command::RunOde(_) => Some(ExperimentKind::RunOde),
            Command::RunSde(_) => Some(ExperimentKind::RunSde),
            Command::RunTilted(_) => Some(ExperimentKind::RunTilted),
            Command::Ksd(_) => Some(ExperimentKind::Ksd),
            Command::Rate(_) => Some(ExperimentKind::Rate),
            Command::Compare(_) => Some(ExperimentKind::Compare),
            Command::ContinuumIdentities(_) => Some(ExperimentKind::ContinuumIdentities),
            Command::ReproduceFig1(_) => Some(ExperimentKind::ReproduceFig1),
            Command::Validate(_) => None,
        }
    }
}

fn configure_threads() {
    if let Ok(v) = std::env::var("STEINLAB_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn load_config(command: &Command) -> Result<ExperimentConfig, Error> {
    let args = command.args();
    let text = std::fs::read_to_string(&args.config)?;
    let mut config = ExperimentConfig::from_json(&text)?;
    if let Some(kind) = command.experiment() {
        if config.experiment != kind {
            return Err(Error::ConfigInvalid(format!(
                "config declares experiment `{}` but the `{}` subcommand was invoked",
                config.experiment.name(),
                kind.name()
            )));
        }
    }
    if let Some(out) = &args.out {
        config.output.directory = out.clone();
    }
    if let Some(seed) = args.seed {
        if let Some(dynamics) = config.dynamics.as_mut() {
            dynamics.seed = seed;
        }
        if let Some(compare) = config.compare.as_mut() {
            compare.seed = seed;
        }
    }
    Ok(config)
}

fn real_main() -> Result<(), Error> {
    configure_threads();
    let cli = Cli::parse();

    let config = load_config(&cli.command)?;
    if let Command::Validate(_) = cli.command {
        let problems = config.validate();
        if problems.is_empty() {
            println!("config is valid");
            return Ok(());
        }
        for p in &problems {
            println!("- {p}");
        }
        return Err(Error::ConfigInvalid(format!(
            "{} problem(s) found",
            problems.len()
        )));
    }

    let artifacts = run(&config)?;
    println!(
        "{}",
        serde_json::json!({
            "experiment": artifacts.experiment,
            "output": config.output.directory,
            "artefacts": artifacts.files,
        })
    );
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let payload = serde_json::json!({
                "error": err.class(),
                "message": err.to_string(),
            });
            eprintln!("{payload}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
