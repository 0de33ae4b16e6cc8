//! `cokrige` command-line interface.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "cokrige", version, about = "Robust multi-fidelity spatiotemporal co-kriging")]
pub struct Cli {
    /// Random seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Station CSV (station_id, lon, lat, timestamp, value, fidelity).
    #[arg(long)]
    pub data: PathBuf,
    /// Keep stations inside `lon_min,lat_min,lon_max,lat_max`.
    #[arg(long)]
    pub bbox: Option<String>,
    /// Keep only the k nearest LF sites of each HF site.
    #[arg(long = "k-nearest")]
    pub k_nearest: Option<usize>,
    /// Average rows per station and day before fitting.
    #[arg(long)]
    pub aggregate_daily: bool,
    /// Drop values above this bound.
    #[arg(long)]
    pub prefilter: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossKind {
    Gaussian,
    Huber,
}

#[derive(Args, Debug, Clone)]
pub struct LossArgs {
    #[arg(long, value_enum, default_value = "huber")]
    pub loss: LossKind,
    /// `diag`, `full` or `reg:<lambda>`.
    #[arg(long)]
    pub whitening: Option<String>,
    /// Huber tuning multiplier `c` in `δ = c·ŝ`.
    #[arg(long = "c-mult")]
    pub c_mult: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ContaminationKind {
    Outlier,
    LevelShift,
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StatsBy {
    Station,
    Fidelity,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a multi-fidelity panel.
    Simulate,
    /// Contaminate the LF observations of a dataset.
    Contaminate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "outlier")]
        kind: ContaminationKind,
        /// Outlier size in LF standard deviations, or the level shift.
        #[arg(long)]
        magnitude: f64,
        #[arg(long, default_value_t = 0.1)]
        frequency: f64,
        #[arg(long, default_value_t = 0.5)]
        changepoint: f64,
        /// Number of randomly chosen stations for a level shift.
        #[arg(long, default_value_t = 1)]
        stations: usize,
        /// LF row of a single outlier.
        #[arg(long, default_value_t = 0)]
        row: usize,
    },
    /// Estimate model parameters.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        loss: LossArgs,
        /// Initial parameters as JSON; data-driven when absent.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Fit the raw values without removing fidelity means.
        #[arg(long)]
        no_center: bool,
    },
    /// Predict the HF field at training HF points or on a grid.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        /// `fit.json` written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        /// `lon_min,lat_min,lon_max,lat_max,n_lon,n_lat`.
        #[arg(long)]
        grid: Option<String>,
        /// Prediction times for the grid; all observed times when empty.
        #[arg(long, value_delimiter = ',')]
        times: Vec<f64>,
    },
    /// Spatiotemporal block cross-validation of the Gaussian and Huber fits.
    Cv {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        loss: LossArgs,
        #[arg(long = "window-len")]
        window_len: Option<f64>,
        #[arg(long = "time-unit")]
        time_unit: Option<f64>,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Monte Carlo comparison of the estimators under contamination.
    Mc {
        /// Scenario grid, e.g. `m=2,5,10 eta=0.1,0.3,0.5`.
        #[arg(long, num_args = 1..)]
        grid: Vec<String>,
        #[arg(long)]
        runs: Option<usize>,
        #[command(flatten)]
        loss: LossArgs,
    },
    /// Attenuation factor, influence curves and the Huber influence bound.
    Theory {
        /// Dataset; simulated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model parameters as JSON; the simulation truth when absent.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
        magnitudes: Vec<f64>,
        /// LF row receiving the single outlier of the influence curves.
        #[arg(long, default_value_t = 0)]
        row: usize,
        /// `general` or `fixed`.
        #[arg(long, default_value = "general")]
        regime: String,
        /// Outlier magnitude and frequency for the attenuation factor.
        #[arg(long, default_value_t = 5.0)]
        magnitude: f64,
        #[arg(long, default_value_t = 0.1)]
        frequency: f64,
        #[arg(long)]
        whitening: Option<String>,
        #[arg(long = "c-mult")]
        c_mult: Option<f64>,
    },
    /// Descriptive statistics per station or fidelity.
    Stats {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "station")]
        by: StatsBy,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("usage", &e.to_string());
            return ExitCode::from(2);
        }
    };
    match commands::run(&cli, args[1..].to_vec()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = e.downcast_ref::<cokrige::Error>().map(commands::error_kind).unwrap_or("runtime");
            report_error(kind, &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}

fn report_error(kind: &str, message: &str) {
    let body = serde_json::json!({ "status": "error", "kind": kind, "message": message.trim() });
    eprintln!("{body}");
}
