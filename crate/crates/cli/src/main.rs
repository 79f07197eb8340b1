//! Command-line pipeline: simulate datasets, fit the variational
//! posterior, report corrected covariances and prior sensitivities, and
//! cross-check everything against MCMC.
//!
//! Exit codes: 0 success, 2 input validation failure, 3 fit did not
//! converge (the report is still written), 4 numerical failure.

mod commands;
mod config;
mod data;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "lrvb", version, about = "Variational posteriors with linear-response covariance corrections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the variational posterior; report covariances and sensitivities.
    Fit(FitArgs),
    /// Tabulate prior sensitivities of one posterior mean.
    Sensitivity(SensitivityArgs),
    /// Predict a hyperparameter perturbation, then refit and compare.
    ManualPerturb(ManualPerturbArgs),
    /// Validate the fit against an MCMC chain.
    CheckMcmc(CheckMcmcArgs),
    /// Generate a synthetic dataset with its generating truth.
    Simulate(SimulateArgs),
}

/// Flags shared by every command.
#[derive(Args)]
struct Common {
    /// Run configuration JSON file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the primary output here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Output format.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset CSV with header `site,treatment,outcome`.
    #[arg(value_name = "DATA")]
    data: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SensitivityArgs {
    /// Dataset CSV with header `site,treatment,outcome`.
    #[arg(value_name = "DATA")]
    data: Option<PathBuf>,
    /// Hyperparameter to report, or `all`.
    #[arg(long, default_value = "all")]
    param: String,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ManualPerturbArgs {
    /// Dataset CSV with header `site,treatment,outcome`.
    #[arg(value_name = "DATA")]
    data: Option<PathBuf>,
    /// Hyperparameter to perturb.
    #[arg(long)]
    param: String,
    /// Additive change applied to the hyperparameter.
    #[arg(long, allow_hyphen_values = true)]
    delta: f64,
    /// Also run MCMC at both hyperparameter settings.
    #[arg(long)]
    mcmc: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CheckMcmcArgs {
    /// Dataset CSV with header `site,treatment,outcome`.
    #[arg(value_name = "DATA")]
    data: Option<PathBuf>,
    /// Write the constrained draws to this CSV file.
    #[arg(long, value_name = "FILE")]
    save_draws: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SimulateArgs {
    /// Number of sites; defaults to the truth section, else 7.
    #[arg(long)]
    sites: Option<usize>,
    /// Observations per site; defaults to the truth section, else 200.
    #[arg(long)]
    per_site: Option<usize>,
    /// Where to write the generating parameters.
    #[arg(long, value_name = "FILE", default_value = "truth.json")]
    truth_out: PathBuf,
    #[command(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for anything the caller can fix in the inputs, 4 for numerical
/// trouble discovered mid-run.
fn exit_code(e: &lrvb::Error) -> u8 {
    use lrvb::Error::*;
    match e {
        Domain { .. } | InvalidParameter(_) | InvalidData(_) | Schema(_) => 2,
        NonFinite { .. } | Optimization(_) | NotPositiveDefinite(_) | Mcmc(_) => 4,
    }
}
