mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use histoswin::data::SynthKind;
use histoswin::Error;

/// Hybrid residual/shifted-window image classifier: synthetic data, training,
/// evaluation, explanations and contour profiling.
///
/// Exit codes: 0 success, 1 usage or configuration error, 2 data or IO error,
/// 3 numeric error. HISTOSWIN_THREADS caps the worker count (0 runs
/// sequentially).
#[derive(Debug, Parser)]
#[command(name = "histoswin", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic class-subdirectory image tree plus split.json.
    Synth(SynthArgs),
    /// Train (optionally several seeded runs) and report test metrics of the
    /// best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a dataset.
    Evaluate(EvaluateArgs),
    /// Explain one image with occlusion, LIME or SHAP.
    Explain(ExplainArgs),
    /// Contour features of every image in a dataset directory.
    Features(FeaturesArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every random draw [required here or in the config].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [required here or in the config].
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Generator [default: blob-vs-stripe].
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    /// Number of images, split evenly between the two classes [default: 200].
    #[arg(long)]
    n: Option<usize>,
    /// Image side in pixels [default: 64].
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    BlobVsStripe,
    Shapes,
}

impl From<KindArg> for SynthKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::BlobVsStripe => SynthKind::BlobVsStripe,
            KindArg::Shapes => SynthKind::Shapes,
        }
    }
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset root holding one subdirectory per class [default: none; the
    /// config may name a root or a synthetic corpus].
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Split manifest [default: <data>/split.json if present, else a fresh
    /// seeded 70/15/15 split].
    #[arg(long, value_name = "FILE")]
    split: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Training epochs [default: 20].
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size [default: 16].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 0.0001].
    #[arg(long)]
    lr: Option<f64>,
    /// Dropout rate on the pooled embedding [default: 0.1].
    #[arg(long)]
    dropout: Option<f64>,
    /// Independent runs with seeds seed, seed+1, ... [default: 1].
    #[arg(long)]
    runs: Option<usize>,
    /// Disable training-time augmentation [default: augmentation on].
    #[arg(long)]
    no_augment: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Subset {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Which part of the split to score [default: test].
    #[arg(long, value_enum)]
    subset: Option<Subset>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Occlusion,
    Lime,
    Shap,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint of the model to explain.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Image to explain; resized to the model input.
    #[arg(long, value_name = "FILE")]
    image: PathBuf,
    #[arg(long, value_enum)]
    method: Method,
    /// Class to explain [default: the predicted class].
    #[arg(long)]
    target: Option<usize>,
    /// Occlusion patch side [default: 16].
    #[arg(long)]
    patch: Option<usize>,
    /// Occlusion stride [default: 16].
    #[arg(long)]
    stride: Option<usize>,
    /// LIME superpixels per side [default: 8].
    #[arg(long)]
    grid: Option<usize>,
    /// LIME perturbation count [default: 1000].
    #[arg(long)]
    samples: Option<usize>,
    /// LIME kernel width [default: 0.25].
    #[arg(long)]
    kernel_width: Option<f64>,
    /// LIME ridge strength [default: 0.001].
    #[arg(long)]
    ridge: Option<f64>,
    /// SHAP principal components [default: 8].
    #[arg(long)]
    components: Option<usize>,
    /// SHAP background rows drawn from the training split [default: 16].
    #[arg(long)]
    background: Option<usize>,
    /// Sample this many SHAP coalitions instead of enumerating all
    /// [default: enumerate].
    #[arg(long)]
    shap_budget: Option<usize>,
}

#[derive(Debug, Args)]
struct FeaturesArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset root holding one subdirectory per class [required here or in
    /// the config].
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Budget(_) => 1,
        Error::Numeric(_) | Error::Contract(_) => 3,
        _ => 2,
    }
}

fn init_threads() -> histoswin::Result<()> {
    let Ok(value) = std::env::var("HISTOSWIN_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("HISTOSWIN_THREADS must be a non-negative integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_threads().and_then(|()| match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Explain(a) => commands::explain(a),
        Command::Features(a) => commands::features(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
