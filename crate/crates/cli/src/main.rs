//! `edgecnn`: data preparation, training, post-training optimization,
//! evaluation and reporting for the gesture CNN.
//!
//! Exit codes: 0 success, 1 validation/numeric error, 2 usage or I/O error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use edgecnn::model::Precision;
use edgecnn::quantize::Ranking;

#[derive(Parser)]
#[command(name = "edgecnn", version, about = "Train, shrink and benchmark a small gesture CNN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Resize a class-folder image tree into folder_<size> variants.
    Prepare(PrepareArgs),
    /// Render a synthetic gesture dataset as class folders.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Export a checkpoint as a deployed model (f32, f16 or i8).
    Quantize(QuantizeArgs),
    /// Remove low-ranked conv channels from a checkpoint.
    Prune(PruneArgs),
    /// Accuracy, loss and confusion matrix on a labelled folder.
    Eval(EvalArgs),
    /// Single-image inference latency.
    Bench(BenchArgs),
    /// Collect eval rows into the size/accuracy tables and plot data.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![64, 96, 128, 256])]
    pub sizes: Vec<usize>,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Render every image of a class identically.
    #[arg(long)]
    pub no_nuisance: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Class-folder dataset; images are resized if needed.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 96)]
    pub input_size: usize,
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from an existing checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub hflip_prob: Option<f64>,
    #[arg(long)]
    pub split: Option<f64>,
    /// Loss weight for the gestures "one", "three" and "four".
    #[arg(long)]
    pub confusable_weight: Option<f64>,
    /// Explicit per-class weights in class-folder order.
    #[arg(long, value_delimiter = ',')]
    pub class_weights: Option<Vec<f64>>,
    /// Per-epoch metrics CSV (default: <out>.history.csv).
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "f32")]
    pub mode: Precision,
    /// Representative class-folder set, required for i8.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// `<layer>=<fraction>`, e.g. `conv2=0.25`; repeatable.
    #[arg(long = "layer", required = true)]
    pub layers: Vec<String>,
    #[arg(long, default_value = "weight-l1")]
    pub ranking: Ranking,
    /// Representative set, required for activation-l1 ranking.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report row JSON for `report --runs`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also measure latency and include it in the row.
    #[arg(long)]
    pub bench: bool,
    #[arg(long, default_value_t = 30)]
    pub iterations: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub iterations: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Directory searched (recursively) for `*.row.json` files.
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Quantize(a) => commands::quantize(a),
        Command::Prune(a) => commands::prune(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
