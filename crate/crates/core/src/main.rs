use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use sticky_slds::app::{exit_code, run_baseline, run_eval, run_fit, run_synth, RunArgs};
use sticky_slds::Result;

#[derive(Parser)]
#[command(version, about = "Unsupervised segmentation with the sticky HDP-SLDS")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct FitFlags {
    /// `key = value` configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Observation CSV; repeat for several synchronized sequences.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
}

impl From<FitFlags> for RunArgs {
    fn from(f: FitFlags) -> Self {
        RunArgs {
            config: f.config,
            data: f.data,
            out: f.out,
            seed: f.seed,
            restarts: f.restarts,
            max_iters: f.max_iters,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model; writes result.json, elbo_trace.csv and modes.csv.
    Fit(FitFlags),
    /// Fit the Gaussian-HMM baseline; writes result.json and modes.csv.
    Baseline(FitFlags),
    /// Sample a synthetic dataset from a `key = value` spec.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions (a modes.csv, or a directory of runs) against labels.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Fit(f) => run_fit(&f.into()).map(|_| ()),
        Command::Baseline(f) => run_baseline(&f.into()).map(|_| ()),
        Command::Synth { config, out } => run_synth(&config, &out).map(|_| ()),
        Command::Eval { pred, labels } => {
            let report = run_eval(&pred, &labels)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
