mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use asana_core::model::ModelVariant;

#[derive(Debug, Parser)]
#[command(name = "asana", version, about = "Yoga posture analysis: train, evaluate, analyze and serve")]
pub struct Cli {
    /// Server/pipeline config file (TOML). Falls back to $ASANA_CONFIG.
    #[arg(long, global = true, env = "ASANA_CONFIG")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (data synthesis, splits, initialization).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Debug logging on stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    /// One JSON record per result line.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled synthetic keypoint dataset.
    Synth(SynthArgs),
    /// Train a classifier and write the best-validation model.
    Train(TrainArgs),
    /// Classification metrics of a model on a dataset.
    Eval(EvalArgs),
    /// Replay a session log: per-frame scores, summary, reproduction check.
    Analyze(AnalyzeArgs),
    /// Convert a float model to int8 weights.
    Quantize(QuantizeArgs),
    /// Zero the smallest-magnitude weights of a float model.
    Prune(PruneArgs),
    /// Per-frame pipeline latency over a session log or frame file.
    Bench(BenchArgs),
    /// Run the session server.
    Serve(ServeArgs),
    /// Score a single frame against a pose.
    PoseCheck(PoseCheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output `.kpjsonl`; labels go to a `.labels.json` sidecar.
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 100)]
    pub samples_per_class: usize,
    #[arg(long, default_value_t = 30)]
    pub window: usize,
    /// Standard deviation of per-angle noise, degrees.
    #[arg(long, default_value_t = 3.0)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, short)]
    pub data: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 16)]
    pub conv_channels: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitPart {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    #[arg(long, short)]
    pub data: PathBuf,
    /// Partition to score; splits are recomputed from the training seed.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitPart,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Session log (`.kpjsonl`).
    pub log: PathBuf,
    /// Score against this pose instead of the logged target.
    #[arg(long)]
    pub pose: Option<String>,
    /// Classifier used for replay; defaults to the configured model.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Print only the summary.
    #[arg(long)]
    pub summary_only: bool,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Fraction of each weight tensor to zero, in [0, 1].
    #[arg(long)]
    pub fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Float,
    Quantized,
}

impl From<VariantArg> for ModelVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Float => ModelVariant::Float,
            VariantArg::Quantized => ModelVariant::Quantized,
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Session log or plain `.kpjsonl` frame file.
    pub log: PathBuf,
    /// Target pose; defaults to the logged one.
    #[arg(long)]
    pub pose: Option<String>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Classifier variant; defaults to the logged one.
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// WebSocket/HTTP listen address.
    #[arg(long)]
    pub listen: Option<String>,
    /// Also accept newline-delimited JSON on this TCP address.
    #[arg(long)]
    pub tcp_listen: Option<String>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub poses: Option<PathBuf>,
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
    #[arg(long)]
    pub max_sessions: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PoseCheckArgs {
    /// File holding one frame record (the first line is used).
    pub frame: PathBuf,
    #[arg(long)]
    pub pose: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
