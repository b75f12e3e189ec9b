use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfg_lab::harness::{run, Experiment, ExperimentConfig, Overrides};
use mfg_lab::Error;

#[derive(Parser)]
#[command(name = "mfg-lab", version, about = "Run a configured experiment and write its report")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; omitted sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Weight identities over the (lambda, s) sweep.
    VerifyWeights(RunArgs),
    /// Empirical constants of the weighted estimates.
    VerifyCarleman(RunArgs),
    /// Weighted bound on time antiderivatives from t0.
    Lemma3(RunArgs),
    /// One source reconstruction from (noisy) observations.
    Reconstruct(RunArgs),
    /// Reconstruction error against noise level.
    StabilitySweep(RunArgs),
    /// Interior stability constant of the linear system.
    StateDet(RunArgs),
    /// Interior stability of differences of nonlinear solutions.
    NonlinearDiff(RunArgs),
}

impl Command {
    fn split(self) -> (Experiment, RunArgs) {
        match self {
            Command::VerifyWeights(a) => (Experiment::VerifyWeights, a),
            Command::VerifyCarleman(a) => (Experiment::VerifyCarleman, a),
            Command::Lemma3(a) => (Experiment::Lemma3, a),
            Command::Reconstruct(a) => (Experiment::Reconstruct, a),
            Command::StabilitySweep(a) => (Experiment::StabilitySweep, a),
            Command::StateDet(a) => (Experiment::StateDet, a),
            Command::NonlinearDiff(a) => (Experiment::NonlinearDiff, a),
        }
    }
}

fn main() -> ExitCode {
    let (experiment, args) = Cli::parse().command.split();
    let result = (|| {
        let cfg = match &args.config {
            Some(p) => ExperimentConfig::from_path(p)?,
            None => ExperimentConfig::default(),
        };
        let ov = Overrides { experiment: Some(experiment), out_dir: args.out.clone(), seed: args.seed };
        run(&cfg.resolve(&ov)?)
    })();
    match result {
        Ok(report) => {
            println!("{} finished in {:.2} s", experiment.name(), report.wall_time_s);
            for f in &report.outputs {
                println!("  {}", report.out_dir.join(&f.name).display());
            }
            println!("  {}", report.out_dir.join("report.json").display());
            println!("content hash {}", report.content_hash);
            ExitCode::SUCCESS
        }
        Err(Error::Config(list)) => {
            eprintln!("invalid configuration:");
            for m in list {
                eprintln!("  {m}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
