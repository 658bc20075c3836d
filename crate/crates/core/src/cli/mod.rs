//! Command-line harness.
//!
//! Exit codes: 0 success, 1 failed verification, 2 configuration error,
//! 3 data error, 4 numerical failure. Failures print one line to stderr
//! prefixed with `error[<category>]:`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::Error;

pub mod commands;
pub mod config;
pub mod demo;

pub use config::{DemoSpec, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "optinject", version, about = "Rank-constrained approximation of nonlinear maps with optimal injections")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the closed-form estimator and report error diagnostics.
    Fit(FitArgs),
    /// Run the alternating injection optimization.
    Iterate(IterateArgs),
    /// Tabulate errors along a rank, dimension or degree axis.
    Sweep(SweepArgs),
    /// Write a synthetic data set.
    Demo(DemoArgs),
    /// Check an estimator against the independent oracles.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Signal CSV (components in rows unless --transpose).
    #[arg(long)]
    pub x: Option<PathBuf>,
    /// Observation CSV.
    #[arg(long)]
    pub y: Option<PathBuf>,
    /// Use synthetic data, e.g. `seed=1,m=6,n=6,samples=200,noise=0.05,nonlinearity=tanh`.
    #[arg(long)]
    pub demo: Option<String>,
    /// CSV files hold one sample per row.
    #[arg(long)]
    pub transpose: bool,
    /// JSON file with the same keys as the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Degrees r_0,..,r_p.
    #[arg(long)]
    pub ranks: Option<String>,
    /// Injection generators, e.g. `poly:2,lift:4:7`.
    #[arg(long)]
    pub injections: Option<String>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `direct` or `fullrank-init`.
    #[arg(long)]
    pub b_mode: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Trace CSV path (defaults to `<out>/trace.csv`).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Record wall-clock timings (makes outputs run-dependent).
    #[arg(long)]
    pub timings: bool,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Lower degree g for the degree-comparison diagnostic.
    #[arg(long)]
    pub split: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct IterateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Also write the final injections as `<out>/injections/v_<j>.csv`.
    #[arg(long)]
    pub dump_injections: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Rank,
    Q,
    Degree,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Rank axis: profiles separated by `;` (e.g. `1,1;2,1;2,2`).
    /// Q axis: dimensions of the last injection. Degree axis: values of p.
    #[arg(long)]
    pub values: String,
}

#[derive(Debug, Clone, Args)]
pub struct DemoArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 6)]
    pub m: usize,
    #[arg(long, default_value_t = 6)]
    pub n: usize,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// `tanh`, `sin` or `cubic`.
    #[arg(long, default_value = "tanh")]
    pub nonlinearity: String,
    #[arg(long, default_value = "demo")]
    pub out: PathBuf,
    /// Write one sample per row.
    #[arg(long)]
    pub transpose: bool,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Estimator JSON to check; fitted from the data when absent.
    #[arg(long)]
    pub estimator: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub candidates: usize,
    #[arg(long, default_value_t = 100)]
    pub z_candidates: usize,
    #[arg(long, default_value_t = crate::oracle::DEFAULT_MAGNITUDE)]
    pub magnitude: f64,
}

#[derive(Debug)]
pub enum CliError {
    Lib(Error),
    VerifyFailed(usize),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(Error::Io(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::VerifyFailed(_) => 1,
            CliError::Lib(e) => match e {
                Error::Config(_) | Error::Rank(_) => 2,
                Error::Data { .. }
                | Error::Shape { .. }
                | Error::SampleMismatch { .. }
                | Error::NonFinite { .. }
                | Error::Serde(_)
                | Error::Io(_) => 3,
                Error::NotSymmetric { .. } | Error::Indefinite { .. } | Error::NoConvergence(_) | Error::Numerical(_) => 4,
            },
        }
    }

    pub fn category(&self) -> &'static str {
        match self.exit_code() {
            1 => "verify",
            2 => "config",
            3 => "data",
            _ => "numerical",
        }
    }

    pub fn diagnostic(&self) -> String {
        let message = match self {
            CliError::VerifyFailed(n) => format!("{n} oracle check(s) failed"),
            CliError::Lib(e) => e.to_string(),
        };
        let flat: Vec<&str> = message.split_whitespace().collect();
        format!("error[{}]: {}", self.category(), flat.join(" "))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Fit(a) => commands::cmd_fit(&a),
        Command::Iterate(a) => commands::cmd_iterate(&a),
        Command::Sweep(a) => commands::cmd_sweep(&a),
        Command::Demo(a) => commands::cmd_demo(&a),
        Command::Verify(a) => commands::cmd_verify(&a),
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                e.exit();
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let first = first.trim_start_matches("error: ");
            eprintln!("error[config]: {first}");
            return 2;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.diagnostic());
            e.exit_code()
        }
    }
}
