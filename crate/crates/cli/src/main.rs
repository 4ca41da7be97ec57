mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use protopart_core::data::MaskPolarity;
use protopart_core::losses::Mode;

/// Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
pub enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<protopart_core::Error> for Failure {
    fn from(e: protopart_core::Error) -> Self {
        if e.is_validation() {
            Failure::Invalid(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: protopart_core::Error| e.to_string())
}

fn parse_polarity(s: &str) -> Result<MaskPolarity, String> {
    s.parse().map_err(|e: protopart_core::Error| e.to_string())
}

#[derive(Parser)]
#[command(name = "protopart", version, about = "Prototypical-part skin lesion classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes log.jsonl, ckpt-epoch{N}.ppt, best.ppt and config.json into --out.
    Train(TrainArgs),
    /// Balanced accuracy and per-class recall on a manifest.
    Evaluate(EvaluateArgs),
    /// Top prototypes behind one prediction.
    Explain(ExplainArgs),
    /// Share of prototypes whose source patch lies inside the lesion.
    Audit(AuditArgs),
    /// Local review service for marking prototypes valid or discard.
    Serve(ServeArgs),
    /// Write a synthetic dataset with a class-correlated corner confound.
    Synth(SynthArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON run config; flags below take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Directory with lesion masks (`<id>_mask.png` or the manifest's mask file names).
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[arg(long = "valid-set")]
    pub valid_set: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long = "lr-features")]
    pub lr_features: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
    #[arg(long)]
    pub lambda4: Option<f64>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long = "top-k")]
    pub top_k: Option<usize>,
    #[arg(long = "prototypes-per-class")]
    pub prototypes_per_class: Option<usize>,
    #[arg(long = "mask-polarity", value_parser = parse_polarity)]
    pub mask_polarity: Option<MaskPolarity>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Restrict to one split (train, val, test); all rows by default.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub top: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// PNG panel: test image | activation overlay | prototype patch | points.
    #[arg(long)]
    pub render: Option<PathBuf>,
}

#[derive(Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Boundary tolerance in pixels.
    #[arg(long, default_value_t = 8)]
    pub band: usize,
    #[arg(long = "mask-polarity", value_parser = parse_polarity, default_value = "lesion-white")]
    pub mask_polarity: MaskPolarity,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Session directory; defaults to `review/` next to the checkpoint.
    #[arg(long = "run-dir")]
    pub run_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 8741)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long = "allow-partial")]
    pub allow_partial: bool,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Images per class.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub confound: f64,
    #[arg(long, default_value_t = 224)]
    pub side: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Explain(a) => commands::explain(a),
        Command::Audit(a) => commands::audit(a),
        Command::Serve(a) => commands::serve(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
