//! `winsum`: preprocess, train, summarize and evaluate windowed
//! pointer-generator summarization models.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

mod commands;
mod config;
mod render;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use winsum::Mode;

use crate::config::ConfigFile;

#[derive(Debug)]
pub enum Failure {
    /// Bad invocation: missing or unreadable inputs, invalid settings.
    Usage(String),
    Runtime(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<winsum::Error> for Failure {
    fn from(e: winsum::Error) -> Self {
        match e {
            winsum::Error::Config(_) | winsum::Error::WindowSpec(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "winsum", version, about = "Windowed pointer-generator summarization of long documents")]
struct Cli {
    /// Flat key = value configuration file; command-line flags override it.
    #[arg(long, global = true, env = "WINSUM_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute corpus length statistics and inject window-shift tokens.
    Preprocess(PreprocessArgs),
    /// Train a model and write a resumable checkpoint and a CSV log.
    Train(TrainArgs),
    /// Summarize a text file with a trained checkpoint.
    Summarize(SummarizeArgs),
    /// Score a checkpoint and/or a baseline on a corpus with ROUGE.
    Evaluate(EvaluateArgs),
    /// Write a synthetic headline corpus and matching embeddings.
    Synth(SynthArgs),
}

/// Model and windowing hyper-parameters.
#[derive(Args, Debug, Default, Clone)]
pub struct ModelFlags {
    /// Window policy.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Window length T_w in tokens.
    #[arg(long)]
    pub tw: Option<usize>,
    /// Window stride in tokens.
    #[arg(long)]
    pub ss: Option<usize>,
    /// Maximum input length T_x (STAN truncates to it).
    #[arg(long)]
    pub tx: Option<usize>,
    /// Maximum summary length T_y in decoder steps.
    #[arg(long)]
    pub ty: Option<usize>,
    /// Static-window weight scale.
    #[arg(long)]
    pub k: Option<f64>,
    /// Static-window weight decay base.
    #[arg(long)]
    pub d: Option<f64>,
}

#[derive(Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    /// JSONL corpus with `document` and `summary` fields.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Word embeddings in whitespace-separated text format.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Keep the first N embedding words.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Output JSONL with `summary_shifted` added to every record.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output JSON with the corpus majority lengths.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Development corpus for model selection by ROUGE-L.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Corpus statistics written by `preprocess` (default: computed).
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Checkpoint written after every epoch (with optimizer state).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV training log (default: <out>.log.csv).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from a checkpoint written by `train`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Encoder hidden size per direction.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Also fine-tune content-word embeddings.
    #[arg(long)]
    pub train_embeddings: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Global gradient-norm clip (0 disables).
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Beam size for dev decoding.
    #[arg(long)]
    pub beam: Option<usize>,
    /// Score the dev set every N epochs.
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Render {
    /// Summary text only.
    Plain,
    /// `[wN]` before the tokens of each window.
    Tags,
    /// One ANSI color per window.
    Color,
}

#[derive(Args)]
pub struct SummarizeArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Text file to summarize (`-` for standard input).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub beam: Option<usize>,
    /// Write the window-annotated token trace as JSONL.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "plain")]
    pub render: Render,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Lead3,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Score a baseline instead of (or next to) a checkpoint.
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub beam: Option<usize>,
    /// Also write the scores as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Directory for train/dev/test JSONL and embeddings.txt.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub train: usize,
    #[arg(long, default_value_t = 10)]
    pub dev: usize,
    #[arg(long, default_value_t = 10)]
    pub test: usize,
    /// Windows per document.
    #[arg(long, default_value_t = 2)]
    pub windows: usize,
    #[arg(long, default_value_t = 12)]
    pub tw: usize,
    #[arg(long, default_value_t = 12)]
    pub ss: usize,
    #[arg(long, default_value_t = 3)]
    pub sentence_words: usize,
    #[arg(long, default_value_t = 8)]
    pub headline_words: usize,
    #[arg(long, default_value_t = 8)]
    pub filler_words: usize,
    /// Embedding dimension.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Preprocess(args) => commands::preprocess(&args, &config),
        Command::Train(args) => commands::train(&args, &config),
        Command::Summarize(args) => commands::summarize(&args, &config),
        Command::Evaluate(args) => commands::evaluate(&args, &config),
        Command::Synth(args) => commands::synth(&args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
