//! `ssvi`: train, evaluate and sweep sparse subspace variational networks.

mod ablate;
mod criteria;
mod error;
mod eval;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ablate::{cmd_ablate, Axis};
use error::CliError;
use eval::{cmd_eval, Split};
use run::{run_root, train_run};

#[derive(Debug, Parser)]
#[command(
    name = "ssvi",
    version,
    about = "Sparse subspace variational inference for small Bayesian MLPs"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Train one run; outputs go to a fresh directory under $SSVI_RUN_ROOT.
    Train {
        config: PathBuf,
        /// Override a config value, e.g. `--set subspace.sparsity=0.9`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Run directory name; defaults to the seed and a timestamp.
        #[arg(long)]
        name: Option<String>,
    },
    /// Evaluate a checkpoint on the dataset of a config; prints JSON.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Posterior draws averaged per prediction.
        #[arg(long, default_value_t = 5)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print all six criteria over a (mu, sigma) grid as CSV.
    CriteriaTable {
        #[arg(
            long,
            value_delimiter = ',',
            allow_hyphen_values = true,
            required = true
        )]
        mu: Vec<f64>,
        #[arg(
            long,
            value_delimiter = ',',
            allow_hyphen_values = true,
            required = true
        )]
        sigma: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
    },
    /// Train one leg per value of an axis and collect `ablate.csv`.
    Ablate {
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        name: Option<String>,
    },
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Train { config, set, name } => {
            let outcome = train_run(&config, &set, &run_root(), name.as_deref());
            if let Some(dir) = &outcome.run_dir {
                println!("{}", dir.display());
            }
            outcome.result.map(|_| ())
        }
        Cmd::Eval {
            checkpoint,
            config,
            set,
            split,
            samples,
            seed,
        } => {
            let report = cmd_eval(&checkpoint, &config, &set, split, samples, seed)?;
            println!(
                "{}",
                serde_json::to_string(&report).map_err(|e| CliError::Io(e.to_string()))?
            );
            Ok(())
        }
        Cmd::CriteriaTable { mu, sigma, lambda } => {
            criteria::criteria_table(&mu, &sigma, lambda, std::io::stdout())
        }
        Cmd::Ablate {
            config,
            axis,
            values,
            set,
            name,
        } => {
            let dir = cmd_ablate(&config, &set, axis, &values, name.as_deref())?;
            println!("{}", dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(e.exit_code())
        }
    }
}
