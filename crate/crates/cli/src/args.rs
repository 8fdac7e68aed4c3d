use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use twoblock_core::eval::{ContaminationTarget, Method};
use twoblock_core::robust_scale::{CenterKind, ScaleKind};

#[derive(Debug, Parser)]
#[command(name = "twoblock", version, about = "Dense, sparse and robust twoblock dimension reduction")]
pub struct Cli {
    /// key=value file whose entries act as defaults for the subcommand flags
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and write it as JSON
    Fit(FitArgs),
    /// Predict Y for new X with a saved model
    Predict(PredictArgs),
    /// Run a simulation scenario grid
    Simulate(SimulateArgs),
    /// Cross-validate a hyperparameter grid
    Cv(CvArgs),
    /// Robust fit and case-weight diagnostics
    Weights(WeightsArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Fit(_) => "fit",
            Self::Predict(_) => "predict",
            Self::Simulate(_) => "simulate",
            Self::Cv(_) => "cv",
            Self::Weights(_) => "weights",
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Predictor CSV
    #[arg(long)]
    pub x: PathBuf,
    /// Response CSV
    #[arg(long)]
    pub y: PathBuf,
    /// Treat the first row as data even if it is not numeric
    #[arg(long)]
    pub no_header: bool,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, default_value = "tb")]
    pub method: Method,
    #[arg(long, default_value_t = 1)]
    pub h_x: usize,
    #[arg(long, default_value_t = 1)]
    pub h_y: usize,
    /// Sparsity of the X weights (sparse methods)
    #[arg(long, default_value_t = 0.5)]
    pub eta_x: f64,
    /// Sparsity of the Y weights (sparse methods)
    #[arg(long, default_value_t = 0.0)]
    pub eta_y: f64,
    /// Centring: mean, median or l1median [default: mean for tb, median for rtb]
    #[arg(long)]
    pub center: Option<CenterKind>,
    /// Scaling: none, std, mad or tau2 [default: std for tb, mad for rtb]
    #[arg(long)]
    pub scale: Option<ScaleKind>,
    #[command(flatten)]
    pub robust: RobustArgs,
}

#[derive(Debug, Args)]
pub struct RobustArgs {
    /// Hampel cutoff preset: aggressive or standard
    #[arg(long, default_value = "aggressive")]
    pub cutoffs: String,
    #[arg(long, default_value_t = 1e-4)]
    pub conv_tol: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output model JSON
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long)]
    pub no_header: bool,
    /// Output CSV of predictions
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 4)]
    pub q: usize,
    #[arg(long, default_value_t = 20)]
    pub p_signal: usize,
    #[arg(long, default_value_t = 0)]
    pub p_noise: usize,
    #[arg(long, default_value_t = 0.5)]
    pub sigma_e: f64,
    #[arg(long, default_value_t = 0.5)]
    pub sigma_f: f64,
    /// Contamination fractions; 0 gives one clean scenario
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2")]
    pub fractions: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "x_only,y_only,both")]
    pub targets: Vec<ContaminationTarget>,
    #[arg(long, default_value_t = 10.0)]
    pub shift: f64,
    #[arg(long, value_delimiter = ',', default_value = "tb,tb-sparse,rtb,rtb-sparse")]
    pub methods: Vec<Method>,
    #[arg(long, default_value_t = 3)]
    pub h_x: usize,
    #[arg(long, default_value_t = 3)]
    pub h_y: usize,
    #[arg(long, default_value_t = 0.5)]
    pub eta_x: f64,
    #[arg(long, default_value_t = 0.0)]
    pub eta_y: f64,
    #[arg(long, default_value = "aggressive")]
    pub cutoffs: String,
    #[arg(long, default_value_t = 50)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output results CSV
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "tb")]
    pub method: Method,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub h_x: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub h_y: Vec<usize>,
    /// X sparsity values tried by sparse methods
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75")]
    pub eta_x: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub eta_y: f64,
    #[arg(long)]
    pub center: Option<CenterKind>,
    #[arg(long)]
    pub scale: Option<ScaleKind>,
    #[command(flatten)]
    pub robust_fit: RobustArgs,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Score by a 10% upper-trimmed mean of casewise errors
    #[arg(long)]
    pub robust: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output grid table CSV
    #[arg(long)]
    pub out: PathBuf,
    /// Output JSON with the selected hyperparameters
    #[arg(long)]
    pub best: PathBuf,
}

#[derive(Debug, Args)]
pub struct WeightsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 1)]
    pub h_x: usize,
    #[arg(long, default_value_t = 1)]
    pub h_y: usize,
    /// Sparsity of the X weights; 0 gives dense RTB
    #[arg(long, default_value_t = 0.0)]
    pub eta_x: f64,
    #[arg(long, default_value_t = 0.0)]
    pub eta_y: f64,
    #[arg(long, default_value = "median")]
    pub center: CenterKind,
    #[arg(long, default_value = "mad")]
    pub scale: ScaleKind,
    #[command(flatten)]
    pub robust: RobustArgs,
    /// Output case-weight CSV (index, w_x, w_y, w_combined)
    #[arg(long)]
    pub out: PathBuf,
    /// Output list of cases with combined weight below 0.5, one index per line
    #[arg(long)]
    pub flagged: Option<PathBuf>,
}
