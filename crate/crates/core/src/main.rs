use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use moegradlab::harness::{
    parse_config, run_biasvar, run_ode_check, run_order_study, run_train, write_csv_file,
    ExperimentConfig,
};
use moegradlab::Error;

/// Router-gradient estimator lab for top-1 mixture-of-experts layers.
#[derive(Parser)]
#[command(name = "moegradlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the MoE network and log metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact bias and variance of every estimator on a small instance.
    Biasvar {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bias ratios as expert outputs shrink.
    Order {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Error of the endpoint-Euler and midpoint rules on test functions.
    Odecheck {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig, Error> {
    let parsed = parse_config(path)?;
    for note in &parsed.notes {
        eprintln!("note: {note}");
    }
    Ok(parsed.config)
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = load(&config)?;
            let report = run_train(&cfg)?;
            write_csv_file(&out, &report.rows)?;
            if report.diverged() {
                return Ok(false);
            }
        }
        Command::Biasvar { config, out } => {
            let rows = run_biasvar(&load(&config)?)?;
            write_csv_file(&out, &rows)?;
        }
        Command::Order { config, out } => {
            let rows = run_order_study(&load(&config)?)?;
            write_csv_file(&out, &rows)?;
        }
        Command::Odecheck { out } => write_csv_file(&out, &run_ode_check())?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: training diverged (non-finite loss); see the flagged rows");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
