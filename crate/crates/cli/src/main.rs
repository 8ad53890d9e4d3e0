//! `mrfusion`: synthetic data, training, prediction and evaluation.

mod commands;
mod record;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mrfusion::data::split::DEFAULT_TRAIN_RATIO;
use mrfusion::forest::DEFAULT_TREES;
use mrfusion::training::{DEFAULT_BATCH, DEFAULT_EPOCHS, DEFAULT_LR};
use mrfusion::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "mrfusion", version, about = "Multi-resolution PAN/MS land cover classification")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// File of `flag = value` lines supplying defaults for the command's
    /// flags; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene with spectral and texture twin classes.
    Synth(SynthArgs),
    /// Split the scene's objects into training and test sets.
    Split(SplitArgs),
    /// Train a network on the training side of a split.
    Train(TrainArgs),
    /// Classify every PAN pixel of a scene.
    Predict(PredictArgs),
    /// Write network features of one split side as CSV (label first).
    ExtractFeatures(ExtractArgs),
    /// Fit a random forest on feature CSV or on extracted features.
    RfFit(RfFitArgs),
    /// Apply a fitted forest to a feature CSV.
    RfPredict(RfPredictArgs),
    /// Score predicted labels against ground truth.
    Evaluate(EvaluateArgs),
    /// Repeat split, train and evaluate over several random splits.
    RunSplits(RunSplitsArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Objects per class.
    #[arg(long, default_value_t = 20)]
    pub objects: usize,
    /// PAN scene side in pixels.
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    /// PAN/MS resolution ratio.
    #[arg(long, default_value_t = 4)]
    pub ratio: usize,
    #[arg(long, default_value_t = 4)]
    pub bands: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip the full-resolution multi-band image.
    #[arg(long)]
    pub no_fused: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fraction of each class's objects used for training.
    #[arg(long, default_value_t = DEFAULT_TRAIN_RATIO)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct SamplingArgs {
    /// Keep at most this many evenly spread patches per object.
    #[arg(long)]
    pub per_object: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// mrfusion, cnnps, pan-only or ms-only.
    #[arg(long, default_value = "mrfusion")]
    pub model: String,
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    pub epochs: usize,
    #[arg(long, default_value_t = DEFAULT_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train on the original patches only.
    #[arg(long)]
    pub no_augment: bool,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Output directory for the model, checkpoint and training log.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Model file written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Classify one pixel per `stride×stride` block.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Output label raster.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// train or test.
    #[arg(long, default_value = "train")]
    pub split_side: String,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RfFitArgs {
    /// Feature CSV (label first).
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub features: Option<PathBuf>,
    /// Extract training features from this dataset instead; needs
    /// `--checkpoint` and `--split`.
    #[arg(long, requires_all = ["checkpoint", "split"])]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TREES)]
    pub trees: usize,
    /// Candidate features per split (default: square root of the width).
    #[arg(long)]
    pub mtry: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RfPredictArgs {
    #[arg(long)]
    pub forest: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// CSV of `truth,pred` rows.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Predicted label raster, or CSV whose last column is the prediction.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth label raster, or CSV whose first column is the label.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub classes: usize,
    /// Output directory for the scores and confusion matrix.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RunSplitsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = DEFAULT_TRAIN_RATIO)]
    pub ratio: f64,
    /// Comma-separated model kinds.
    #[arg(long, default_value = "mrfusion")]
    pub models: String,
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    pub epochs: usize,
    #[arg(long, default_value_t = DEFAULT_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub no_augment: bool,
    /// Also score a forest fitted on each model's features.
    #[arg(long)]
    pub with_rf: bool,
    #[arg(long, default_value_t = DEFAULT_TREES)]
    pub trees: usize,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Output directory for one CSV per model.
    #[arg(long)]
    pub out: PathBuf,
}

/// Inserts `--flag value` pairs from the config file right after the verb,
/// so that anything on the command line overrides them.
fn merge_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(pos) = args.iter().position(|a| a == "--config" || a.to_string_lossy().starts_with("--config=")) else {
        return Ok(args);
    };
    let path = match args[pos].to_string_lossy().strip_prefix("--config=") {
        Some(p) => PathBuf::from(p),
        None => match args.get(pos + 1) {
            Some(p) => PathBuf::from(p),
            None => return Ok(args),
        },
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("{}:{}: expected flag = value", path.display(), n + 1)));
        };
        let (k, v) = (k.trim().replace('_', "-"), v.trim().trim_matches('"'));
        match v {
            "true" => extra.push(OsString::from(format!("--{k}"))),
            "false" => {}
            _ => {
                extra.push(OsString::from(format!("--{k}")));
                extra.push(OsString::from(v));
            }
        }
    }
    // The verb is the first argument that is neither a global flag nor its value.
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--threads" || a == "--config" {
            i += 2;
        } else if a.starts_with("--") {
            i += 1;
        } else {
            break;
        }
    }
    let mut out = args[..(i + 1).min(args.len())].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[(i + 1).min(args.len())..]);
    Ok(out)
}

fn fail(e: &Error) -> ExitCode {
    let msg = match e {
        Error::Dimension(m)
        | Error::Numeric(m)
        | Error::Config(m)
        | Error::Input(m)
        | Error::State(m)
        | Error::Format(m)
        | Error::Alignment(m)
        | Error::Bounds(m)
        | Error::Label(m)
        | Error::Split(m) => m.clone(),
        other => other.to_string(),
    }
    .replace('\n', " ");
    eprintln!("error: {}: {msg}", e.kind());
    ExitCode::from(1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv = match merge_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => return fail(&e),
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(&Error::Config(format!("cannot size the thread pool: {e}")));
        }
    }
    match commands::run(&cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
