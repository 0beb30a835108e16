//! `msrnet`: dataset synthesis, training, inference, classical Retinex,
//! evaluation and benchmarking.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// An invalid flag combination or config file.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "msrnet", version, about = "Multi-scale Retinex and MSR-net low-light enhancement")]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// More log output; repeat for debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render degraded low-light copies of HQ images and write a manifest.
    Synthesize(SynthesizeArgs),
    /// Train an MSR-net on a manifest's train split.
    Train(TrainArgs),
    /// Enhance an image or a directory of images with a trained model.
    Enhance(EnhanceArgs),
    /// Classical multi-scale Retinex.
    Msr(MsrArgs),
    /// Score a model, pre-enhanced images, or the raw inputs against ground truth.
    Evaluate(EvaluateArgs),
    /// Time inference on square random inputs.
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Debug)]
pub struct SynthesizeArgs {
    /// Directory of high-quality PNG images.
    #[arg(long)]
    pub hq_dir: PathBuf,
    /// Output directory (receives ll/ and manifest.jsonl).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub per_image: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of HQ sources held out for testing.
    #[arg(long, default_value_t = 0.2, conflicts_with = "no_split")]
    pub test_fraction: f64,
    /// Mark every row as train.
    #[arg(long)]
    pub no_split: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Flat TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoint.msrn, loss.csv and run_config.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint, optimizer state included.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub lambda: Option<f32>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub log_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Image file or directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file, or directory when the input is a directory.
    #[arg(long)]
    pub output: PathBuf,
    /// Process in square tiles of this side.
    #[arg(long)]
    pub tile: Option<usize>,
    /// Tile overlap (default: the model's receptive radius).
    #[arg(long, requires = "tile")]
    pub overlap: Option<usize>,
    /// Expected architecture; a checkpoint that differs is rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write input|output comparison sheets into this directory.
    #[arg(long)]
    pub sheet: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MsrArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Gaussian surround scales, strictly increasing, equal weights.
    #[arg(long, value_delimiter = ',', default_values_t = [15.0, 80.0, 250.0])]
    pub scales: Vec<f64>,
    /// Percent clipped at each end before stretching to [0, 1].
    #[arg(long, default_value_t = 1.0)]
    pub clip: f32,
    /// Compute through the cascaded Gaussian network instead of direct blurs.
    #[arg(long)]
    pub cascade: bool,
    /// Apply the classical color restoration before display mapping.
    #[arg(long)]
    pub crf: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AngularArg {
    Global,
    PerPixel,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SsimArg {
    Luma,
    ChannelMean,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["model", "enhanced_dir", "input_baseline", "ground_truth"])))]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory of enhanced images named like the LL files.
    #[arg(long)]
    pub enhanced_dir: Option<PathBuf>,
    /// Score the unenhanced low-light inputs.
    #[arg(long)]
    pub input_baseline: bool,
    /// Score ground truth against itself.
    #[arg(long)]
    pub ground_truth: bool,
    /// Directory for report.csv, report.json and run_config.json.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value_t = AngularArg::Global)]
    pub angular: AngularArg,
    #[arg(long, value_enum, default_value_t = SsimArg::Luma)]
    pub ssim: SsimArg,
    #[arg(long, requires = "model")]
    pub tile: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    /// Checkpoint to time; a randomly initialized default network if omitted.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = msrnet::bench::DEFAULT_SIZES)]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub repeat: usize,
    #[arg(long)]
    pub tile: Option<usize>,
    /// CSV output path; printed to stdout either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<msrnet::Error>() {
        Some(msrnet::Error::Config(_) | msrnet::Error::InvalidArgument(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Synthesize(a) => commands::synthesize(a),
        Command::Train(a) => commands::train(a),
        Command::Enhance(a) => commands::enhance(a),
        Command::Msr(a) => commands::msr(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Benchmark(a) => commands::benchmark(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
