use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

mod commands;
mod config;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(sepsurf::Error),
}

impl From<sepsurf::Error> for CliError {
    fn from(e: sepsurf::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(sepsurf::Error::InvalidArgument(_)) => 2,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e @ sepsurf::Error::SingularSystem(_)) => write!(f, "{e} (try a larger --ridge)"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "sepsurf", version, about = "Separable covariance estimation and prediction for sparse random surfaces")]
struct Cli {
    /// JSON config with the command's flags; flags on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "SEPSURF_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate sparse noisy surfaces from a scenario covariance.
    Simulate(SimulateArgs),
    /// Fit a covariance model to a dataset.
    Estimate(EstimateArgs),
    /// Predict a surface from its observations, with confidence bands.
    Predict(PredictArgs),
    /// Hold-out comparison of prediction methods.
    Evaluate(EvaluateArgs),
    /// Estimation error and runtime over simulated replicates.
    Benchmark(BenchmarkArgs),
    /// Convert option quotes to implied-volatility observations.
    IngestOptions(IngestArgs),
}

// Every field is optional so that unset flags can fall back to the config
// file. Defaults are filled in by the command and recorded in the output.

#[derive(Args, Serialize, Deserialize, Clone, Debug, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateArgs {
    /// fourier, brownian, gneiting or fourier_legendre
    #[arg(long)]
    pub scenario: Option<String>,
    /// Grid size, `d` or `d1,d2`
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<usize>>,
    /// Number of surfaces
    #[arg(long)]
    pub n: Option<usize>,
    /// Fraction of cells observed per surface (values above 1 are percentages)
    #[arg(long)]
    pub p: Option<f64>,
    /// Noise variance (default 1 / number of cells)
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output dataset CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output truth JSON (default: next to the dataset)
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateArgs {
    /// Dataset CSV with columns surface_id,t,s,y
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<usize>>,
    /// separable or 4d
    #[arg(long)]
    pub method: Option<String>,
    /// Alternation steps of the separable estimator (1 gives the one-step estimator)
    #[arg(long)]
    pub steps: Option<usize>,
    /// Fixed bandwidths instead of cross-validation: `h`, `h1,h2` or eight
    /// values for mean, A, B and variance surface
    #[arg(long, value_delimiter = ',')]
    pub bandwidth: Option<Vec<f64>>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Number of cross-validation candidates per smoother
    #[arg(long)]
    pub candidates: Option<usize>,
    /// Project the kernels onto the positive semi-definite cone
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub psd_project: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output model JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PredictArgs {
    /// Model JSON written by `estimate`
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Observations CSV with columns t,s,y (and optionally surface_id)
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Surface to predict when the input holds several
    #[arg(long)]
    pub surface: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub ridge: Option<f64>,
    /// Monte Carlo draws for the simultaneous band
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<usize>>,
    /// chain, itm, otm, short or long
    #[arg(long)]
    pub pattern: Option<String>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Comma-separated: presmooth, separable, 4d, oracle
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Truth JSON from `simulate`, required by the oracle method
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub bandwidth: Option<Vec<f64>>,
    /// Bandwidth of the per-surface pre-smoother, `h` or `h1,h2`
    #[arg(long, value_delimiter = ',')]
    pub presmooth_bandwidth: Option<Vec<f64>>,
    #[arg(long)]
    pub ridge: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkArgs {
    #[arg(long, value_delimiter = ',')]
    pub scenario: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<usize>>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Sampling fractions (values above 1 are percentages)
    #[arg(long, value_delimiter = ',')]
    pub p: Option<Vec<f64>>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub bandwidth: Option<Vec<f64>>,
    /// Also run the 4D smoother
    #[arg(long = "include-4d", num_args = 0..=1, default_missing_value = "true")]
    pub include_4d: Option<bool>,
    /// Also run the unpooled separable path
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub include_unpooled: Option<bool>,
    /// Also compute the best separable approximation of the latent surfaces
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub include_bsa: Option<bool>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Wall times CSV (not reproducible across runs)
    #[arg(long)]
    pub timings: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug, Default)]
#[serde(default, deny_unknown_fields)]
pub struct IngestArgs {
    /// Quotes CSV with columns surface_id,spot,strike,tau_days,rate,price
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tau_min_days: Option<f64>,
    #[arg(long)]
    pub tau_max_days: Option<f64>,
    #[arg(long)]
    pub log_moneyness_min: Option<f64>,
    #[arg(long)]
    pub log_moneyness_max: Option<f64>,
    #[arg(long)]
    pub days_per_year: Option<f64>,
    /// Record log implied volatility (default true)
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub log_iv: Option<bool>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot set up thread pool: {e}")))?;
    }
    let cfg = |name: &str| cli.config.as_deref().map(|p| config::load(p, name)).transpose();
    match &cli.command {
        Command::Simulate(a) => commands::simulate(config::merge(a, cfg("simulate")?)?),
        Command::Estimate(a) => commands::estimate(config::merge(a, cfg("estimate")?)?),
        Command::Predict(a) => commands::predict(config::merge(a, cfg("predict")?)?),
        Command::Evaluate(a) => commands::evaluate(config::merge(a, cfg("evaluate")?)?),
        Command::Benchmark(a) => commands::benchmark(config::merge(a, cfg("benchmark")?)?),
        Command::IngestOptions(a) => commands::ingest(config::merge(a, cfg("ingest-options")?)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
