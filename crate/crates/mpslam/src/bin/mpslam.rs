//! Experiment pipeline CLI. Every subcommand loads one TOML configuration,
//! applies the flag overrides and drives the corresponding harness phase.
//! Exit codes: 0 success, 2 configuration error, 3 data error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mpslam::config::RunConfig;
use mpslam::harness::{self, ExperimentPlan, HarnessError, Overrides};

#[derive(Parser)]
#[command(
    name = "mpslam",
    version,
    about = "Multipath SLAM experiments: simulate snapshots, estimate, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw the measurement snapshots and truth logs
    Simulate(CommonArgs),
    /// Run the estimator over previously simulated snapshots
    Run(CommonArgs),
    /// Fold the run logs into metric CSV files
    Eval(CommonArgs),
    /// Simulate, estimate and evaluate in one invocation
    Full(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration TOML
    #[arg(short, long)]
    config: PathBuf,
    /// Override the configured output directory
    #[arg(long)]
    output: Option<PathBuf>,
    /// Override the configured base seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured number of runs
    #[arg(long)]
    runs: Option<usize>,
    /// Truncate every run to this many steps
    #[arg(long)]
    steps: Option<usize>,
    /// Worker threads across runs (default: all cores)
    #[arg(long)]
    jobs: Option<usize>,
    /// Skip runs whose output files already exist
    #[arg(long)]
    resume: bool,
}

impl CommonArgs {
    fn plan(&self) -> Result<ExperimentPlan, HarnessError> {
        let cfg = RunConfig::load(&self.config)?;
        let overrides = Overrides {
            output: self.output.clone(),
            seed: self.seed,
            runs: self.runs,
            steps: self.steps,
            jobs: self.jobs,
            resume: self.resume,
        };
        harness::plan(&cfg, &overrides)
    }
}

fn dispatch(cmd: &Cmd) -> Result<(), HarnessError> {
    let (args, phase): (_, fn(&ExperimentPlan) -> Result<(), HarnessError>) = match cmd {
        Cmd::Simulate(a) => (a, harness::cli_simulate),
        Cmd::Run(a) => (a, harness::cli_run),
        Cmd::Eval(a) => (a, harness::cli_eval),
        Cmd::Full(a) => (a, harness::cli_full),
    };
    phase(&args.plan()?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
