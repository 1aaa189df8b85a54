use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "mscal", version, about = "Calibrate physical models against several biased data sources")]
pub struct Cli {
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a scripted simulation study.
    Simulate(SimulateArgs),
    /// Reduce a gridded image to point observations.
    Downsample(DownsampleArgs),
    /// Average aligned sources pointwise.
    Stack(StackArgs),
    /// Fit a calibration model by maximum likelihood or MCMC.
    Calibrate(CalibrateArgs),
    /// Predict from a saved fit.
    Predict(PredictArgs),
    /// Run the dense oracle suites.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    Example1,
    Example2,
    Example3,
    Mogi,
    MogiImages,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Example1 => "example1",
            Experiment::Example2 => "example2",
            Experiment::Example3 => "example3",
            Experiment::Mogi => "mogi",
            Experiment::MogiImages => "mogi-images",
        }
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    pub experiment: Experiment,
    /// Output directory; existing files are never overwritten.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Monte Carlo repetitions per grid size (example1).
    #[arg(long)]
    pub reps: Option<usize>,
    /// Comma-separated grid sizes (example1).
    #[arg(long, value_delimiter = ',')]
    pub n_grid: Option<Vec<usize>>,
    /// Number of sources (example3).
    #[arg(long)]
    pub k: Option<usize>,
    /// Full chain lengths and replicate counts.
    #[arg(long)]
    pub full_scale: bool,
    /// Record wall-clock timings in the manifest.
    #[arg(long)]
    pub timings: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DownsampleMethod {
    Uniform,
    Quadtree,
}

#[derive(Args, Debug)]
pub struct DownsampleArgs {
    /// Grid CSV with columns row,col,easting_m,northing_m,value.
    pub input: PathBuf,
    /// Grid metadata; defaults to the input path with a .json extension.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DownsampleMethod::Uniform)]
    pub method: DownsampleMethod,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub min_box: usize,
    #[arg(long, default_value_t = 64)]
    pub max_box: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct StackArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelArg {
    Gasp,
    Sgasp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Mle,
    Mcmc,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    /// Observation CSVs, one per source.
    #[arg(long, num_args = 1..)]
    pub data: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub forward: Option<String>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Total MCMC sweeps including burn-in.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Kernel of the per-source bias, or `none`.
    #[arg(long)]
    pub bias: Option<String>,
    #[arg(long)]
    pub fit_mean: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; existing files are never overwritten.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// `fit.json` written by `calibrate`.
    #[arg(long)]
    pub fit: PathBuf,
    /// CSV of inputs with columns x1,...,xp.
    #[arg(long)]
    pub at: PathBuf,
    /// discrepancy, bias, field or reality.
    #[arg(long, default_value = "reality")]
    pub component: String,
    /// Source number, starting at 1.
    #[arg(long, default_value_t = 1)]
    pub source: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
