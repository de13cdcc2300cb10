//! Batch command-line front end: configuration, CSV datasets and the
//! train / predict / eval / sample / compare / curve / gradcheck commands.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use data::Dataset;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ggpm", version, about = "Generalized Gaussian process models")]
pub struct Cli {
    /// Add wall-clock times to reports and tables (makes output run-dependent).
    #[arg(long, global = true)]
    pub timing: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit hyperparameters and write a model file plus a JSON report.
    Train(TrainCmd),
    /// Write predictive summaries for the rows of a CSV.
    Predict(ModelDataCmd),
    /// Write MAE, MSE and NLP on a labelled CSV.
    Eval(ModelDataCmd),
    /// Draw a synthetic dataset from the configured prior and likelihood.
    Sample(SampleCmd),
    /// Fit all four engines from shared starts and tabulate the results.
    Compare(CompareCmd),
    /// Tabulate a 1-D model's latent and predictive curves on a grid.
    Curve(CurveCmd),
    /// Compare the analytic log-marginal gradient with central differences.
    Gradcheck(GradcheckCmd),
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[arg(long)]
    pub config: String,
    #[arg(long)]
    pub data: String,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Report file; defaults to the model path with extension `.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub engine: Option<String>,
}

#[derive(Debug, Args)]
pub struct ModelDataCmd {
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub data: String,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleCmd {
    #[arg(long)]
    pub config: String,
    /// Grid `lo:hi:n`, comma-separated per input dimension.
    #[arg(long, conflicts_with = "data", required_unless_present = "data", allow_hyphen_values = true)]
    pub grid: Option<String>,
    /// CSV whose input columns give the sample locations.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareCmd {
    #[arg(long)]
    pub config: String,
    /// Training data.
    #[arg(long)]
    pub data: String,
    /// Held-out data for the metrics; the training data when omitted.
    #[arg(long)]
    pub test: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV table to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurveCmd {
    #[arg(long)]
    pub model: String,
    /// Input grid `lo:hi:n`.
    #[arg(long, allow_hyphen_values = true)]
    pub grid: String,
    /// Output grid `lo:hi:n` for the density columns.
    #[arg(long, allow_hyphen_values = true)]
    pub y_grid: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckCmd {
    #[arg(long)]
    pub config: String,
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub engine: Option<String>,
    /// JSON report to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs a parsed command and returns the text for stdout.
pub fn execute(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Train(c) => commands::train(&commands::TrainArgs {
            config: &c.config,
            data: &c.data,
            out: &c.out,
            report: c.report.as_deref(),
            seed: c.seed,
            engine: c.engine.as_deref(),
            timing: cli.timing,
        }),
        Command::Predict(c) => commands::predict(&c.model, &c.data, c.out.as_deref()),
        Command::Eval(c) => commands::eval(&c.model, &c.data, c.out.as_deref()),
        Command::Sample(c) => commands::sample(&commands::SampleArgs {
            config: &c.config,
            grid: c.grid.as_deref(),
            inputs: c.data.as_deref(),
            seed: c.seed,
            out: c.out.as_deref(),
        }),
        Command::Compare(c) => commands::compare(&commands::CompareArgs {
            config: &c.config,
            data: &c.data,
            test: c.test.as_deref(),
            seed: c.seed,
            out: c.out.as_deref(),
            timing: cli.timing,
        }),
        Command::Curve(c) => commands::curve(&c.model, &c.grid, c.y_grid.as_deref(), c.out.as_deref()),
        Command::Gradcheck(c) => commands::gradcheck(&c.config, &c.data, c.engine.as_deref(), c.out.as_deref()),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
