//! `cpgrid` command line.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or validation.

mod commands;
mod manifest;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
        }
    }
}

impl From<cpgrid::Error> for CliError {
    fn from(e: cpgrid::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cpgrid", version, about = "Per-cell conformal prediction for gridded forecasts")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Record wall-clock timestamps in the run manifest.
    #[arg(long, global = true)]
    record_time: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic AR(1) forecast dataset.
    Generate(GenerateArgs),
    /// Score a calibration directory and write per-cell quantiles.
    Calibrate(CalibrateArgs),
    /// Turn forecasts into conformal intervals.
    Predict(PredictArgs),
    /// Measure coverage and width of interval files against truths.
    Evaluate(EvaluateArgs),
    /// Render width heatmaps or coverage curves as SVG and CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub nx: usize,
    #[arg(long)]
    pub ny: usize,
    #[arg(long)]
    pub t_out: usize,
    #[arg(long, default_value_t = 1)]
    pub nvar: usize,
    #[arg(long)]
    pub n_samples: usize,
    /// AR(1) persistence, in (-1, 1).
    #[arg(long, default_value_t = 0.8, allow_negative_numbers = true)]
    pub ar: f64,
    /// Innovation sd per step.
    #[arg(long, default_value_t = 1.0)]
    pub sd: f64,
    /// Reported / true sd ratio of the synthetic model.
    #[arg(long, default_value_t = 1.0)]
    pub miscal: f64,
    #[arg(long)]
    pub hetero: bool,
    /// Spatial smoothing radius in cells.
    #[arg(long, default_value_t = 2.0)]
    pub corr_len: f64,
    /// Constant forcing offset added to truth and forecast.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub forcing: f64,
    /// Hours between lead times.
    #[arg(long, default_value_t = 3.0)]
    pub step_hours: f64,
    /// Index of the first sample (samples use disjoint random streams).
    #[arg(long, default_value_t = 0)]
    pub first_index: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyArg {
    Res,
    Std,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    /// Directory of `<stem>.truth.cpt` plus `<stem>.prediction.cpt` (res)
    /// or `<stem>.mean.cpt` and `<stem>.sigma.cpt` (std).
    #[arg(long)]
    pub calib_dir: PathBuf,
    #[arg(long, value_enum)]
    pub strategy: StrategyArg,
    /// Comma-separated miscoverage levels.
    #[arg(long, value_delimiter = ',', required = true)]
    pub alpha: Vec<f64>,
    #[arg(long, default_value_t = cpgrid::scores::DEFAULT_SIGMA_FLOOR)]
    pub sigma_floor: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    /// Quantile file written by `calibrate`.
    #[arg(long, required_unless_present = "uncalibrated_alpha")]
    pub quantiles: Option<PathBuf>,
    /// Build uncalibrated `mean ± z·sigma` intervals at this alpha instead.
    #[arg(long, conflicts_with = "quantiles")]
    pub uncalibrated_alpha: Option<f64>,
    /// Forecast file, or a directory of `<stem>.prediction.cpt` (res) /
    /// `<stem>.mean.cpt` (std) files.
    #[arg(long)]
    pub prediction: PathBuf,
    /// Sigma file, or directory of `<stem>.sigma.cpt`; required for std.
    #[arg(long)]
    pub sigma: Option<PathBuf>,
    /// Output stem (file mode) or directory (directory mode).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub intervals_dir: PathBuf,
    #[arg(long)]
    pub truth_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Interval stem to map (`<stem>.lower.cpt`, `<stem>.upper.cpt`).
    #[arg(long, conflicts_with = "coverage_curve", requires_all = ["lead_times", "var"])]
    pub intervals: Option<PathBuf>,
    /// Lead times in hours.
    #[arg(long, value_delimiter = ',')]
    pub lead_times: Vec<f64>,
    #[arg(long)]
    pub var: Option<String>,
    /// Comma-separated coverage reports from `evaluate`.
    #[arg(long, value_delimiter = ',', required_unless_present = "intervals")]
    pub coverage_curve: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Shared run options.
#[derive(Debug, Clone, Copy)]
pub struct RunOpts {
    pub record_time: bool,
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return 2;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return 1;
        }
    }
    let opts = RunOpts {
        record_time: cli.record_time,
    };
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a, opts),
        Command::Calibrate(a) => commands::calibrate(&a, opts),
        Command::Predict(a) => commands::predict(&a, opts),
        Command::Evaluate(a) => commands::evaluate(&a, opts),
        Command::Report(a) => commands::report(&a, opts),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
