//! `flowmix`: train, sample from, classify with and evaluate flow mixture models.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data error,
//! 4 numerical failure (a checkpoint is kept), 5 model/bundle file error.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "flowmix", version, about = "Mixtures of invertible flow models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a GenMM or LatMM model on a dataset.
    Train(TrainArgs),
    /// Draw samples from a trained model.
    Sample(SampleArgs),
    /// Decode a latent-space path between two data points.
    Interpolate(InterpolateArgs),
    /// Per-class maximum-likelihood classification.
    #[command(subcommand)]
    Classify(ClassifyCommand),
    /// Likelihood and two-sample metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
}

/// Model and training settings. Each flag overrides the same key of `--config`.
#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    /// Run configuration file with one `key=value` per line.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// genmm or latmm.
    #[arg(long)]
    pub model: Option<String>,
    /// Number of mixture components.
    #[arg(long)]
    pub k: Option<String>,
    /// Flow steps per network.
    #[arg(long)]
    pub depth: Option<String>,
    /// Hidden width of coupling networks, or `auto`.
    #[arg(long)]
    pub hidden: Option<String>,
    /// Bound on coupling log-scales.
    #[arg(long)]
    pub clamp: Option<String>,
    /// Comma-separated step indices followed by a split, or `none`.
    #[arg(long)]
    pub splits: Option<String>,
    /// Image grid `CxHxW` for squeeze layers and image output.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub init_range: Option<String>,
    /// LatMM regularizer: `gamma[:a:b]`, `l2:lambda` or `none`.
    #[arg(long)]
    pub regularizer: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<String>,
    /// Epochs between refreshes of the frozen E-step model.
    #[arg(long)]
    pub em_gap: Option<String>,
    /// Epochs between mixing-weight updates.
    #[arg(long)]
    pub prior_gap: Option<String>,
    /// auto, on or off.
    #[arg(long)]
    pub dim_scaling: Option<String>,
    /// sgd or adam.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// identity or data.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
}

/// Input dataset. Each flag overrides the same key of `--config`.
#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// CSV file, or IDX image file.
    #[arg(long)]
    pub data: Option<String>,
    /// CSV label column, by 0-based index or header name.
    #[arg(long)]
    pub label_column: Option<String>,
    /// none, standardize or dequantize[:scale].
    #[arg(long)]
    pub preprocess: Option<String>,
    /// IDX label file matching an IDX image file.
    #[arg(long)]
    pub idx_labels: Option<String>,
    /// Mean-pool IDX images to `ROWSxCOLS`.
    #[arg(long)]
    pub downsample: Option<String>,
}

impl ModelArgs {
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        let all = [
            ("model", &self.model),
            ("k", &self.k),
            ("depth", &self.depth),
            ("hidden", &self.hidden),
            ("clamp", &self.clamp),
            ("splits", &self.splits),
            ("grid", &self.grid),
            ("init_range", &self.init_range),
            ("regularizer", &self.regularizer),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("learning_rate", &self.learning_rate),
            ("em_gap", &self.em_gap),
            ("prior_gap", &self.prior_gap),
            ("dim_scaling", &self.dim_scaling),
            ("optimizer", &self.optimizer),
            ("init", &self.init),
            ("seed", &self.seed),
        ];
        all.into_iter().filter_map(|(k, v)| v.clone().map(|v| (k, v))).collect()
    }
}

impl DataArgs {
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        let all = [
            ("data", &self.data),
            ("label_column", &self.label_column),
            ("preprocess", &self.preprocess),
            ("idx_labels", &self.idx_labels),
            ("downsample", &self.downsample),
        ];
        all.into_iter().filter_map(|(k, v)| v.clone().map(|v| (k, v))).collect()
    }
}

/// Image rendering of samples whose dimension is an `HxW` grid.
#[derive(Args, Debug, Default)]
pub struct ImageArgs {
    /// Write one PGM file per row into this directory.
    #[arg(long)]
    pub pgm_dir: Option<PathBuf>,
    /// Write all rows as one SVG contact sheet.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    /// Image shape `HxW` (or `1xHxW`); defaults to the grid stored with the model.
    #[arg(long)]
    pub image: Option<String>,
    /// Value drawn as white.
    #[arg(long, default_value_t = 1.0)]
    pub pixel_max: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub model_file: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Samples CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub image: ImageArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionArg {
    /// Component with the largest posterior for each endpoint.
    Argmax,
    /// Component drawn from the mixing weights.
    Random,
}

#[derive(Args, Debug)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub model_file: PathBuf,
    /// Dataset holding the endpoints.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub label_column: Option<String>,
    /// Row index of the start point.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    /// Row index of the end point.
    #[arg(long, default_value_t = 1)]
    pub end: usize,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(2..))]
    pub steps: u64,
    #[arg(long, value_enum, default_value_t = SelectionArg::Argmax)]
    pub selection: SelectionArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub image: ImageArgs,
}

#[derive(Subcommand, Debug)]
pub enum ClassifyCommand {
    /// Train one model per class and save the bundle.
    Fit(ClassifyFitArgs),
    /// Predict classes; writes index, class and per-class log-likelihoods.
    Predict(ClassifyPredictArgs),
    /// Train a model for one new class and add it to a saved bundle.
    AddClass(ClassifyAddArgs),
    /// Accuracy on a labelled dataset.
    Accuracy(ClassifyAccuracyArgs),
}

#[derive(Args, Debug)]
pub struct ClassifyFitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Bundle directory to write.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Add the empirical log class frequencies to class scores.
    #[arg(long)]
    pub class_prior: bool,
    /// Labelled dataset for the per-epoch accuracy curve.
    #[arg(long, requires = "curve")]
    pub test_data: Option<PathBuf>,
    /// Per-epoch train (and test) accuracy CSV.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ClassifyPredictArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Label column to drop from the features.
    #[arg(long)]
    pub label_column: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ClassifyAddArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub class_id: String,
    /// Samples of the new class.
    #[arg(long)]
    pub data: PathBuf,
    /// With a label column, only rows carrying `class_id` are used.
    #[arg(long)]
    pub label_column: Option<String>,
}

#[derive(Args, Debug)]
pub struct ClassifyAccuracyArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub label_column: String,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Negative log-likelihood in nats per dimension.
    Nll(EvalNllArgs),
    /// Unbiased MMD² with a Gaussian kernel.
    Mmd(TwoSampleArgs),
    /// Leave-one-out 1-nearest-neighbour two-sample accuracy.
    Onenn(TwoSampleArgs),
    /// Train for each K and report final held-out NLL.
    NllVsK(NllVsKArgs),
}

#[derive(Args, Debug)]
pub struct EvalNllArgs {
    #[arg(long)]
    pub model_file: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub label_column: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TwoSampleArgs {
    /// First sample set (CSV).
    #[arg(long, required_unless_present = "model_file")]
    pub a: Option<PathBuf>,
    /// Draw the first set from this model instead, as many rows as `--b`.
    #[arg(long, conflicts_with = "a")]
    pub model_file: Option<PathBuf>,
    /// Second sample set (CSV).
    #[arg(long)]
    pub b: PathBuf,
    /// Label column present in the CSV inputs, dropped before comparison.
    #[arg(long)]
    pub label_column: Option<String>,
    /// Kernel bandwidth; median pairwise distance when omitted.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct NllVsKArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated K values.
    #[arg(long, default_value = "1,2,3,4")]
    pub ks: String,
    /// Fraction of rows used for training; the rest is held out.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flowmix: {e}");
            ExitCode::from(e.code())
        }
    }
}
