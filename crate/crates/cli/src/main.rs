//! `mola`: parameter accounting, training, continual learning and analysis.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mola::analysis::{Comparand, ReportFormat};

/// Failure classes; each maps to an exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration (exit 1).
    Config(String),
    /// Failure while running (exit 2).
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "mola", version, about = "Mixture of LoRA experts with per-layer expert counts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the trainable parameter count of an allocation.
    Params {
        /// `llama2-7b`, `toy-default`, or `layers,d_model,d_ffn,rank`.
        #[arg(long)]
        dims: String,
        /// `inverted:2468`, `shape=rect group=5555`, `counts=1,1,3,3`, ...
        #[arg(long)]
        alloc: String,
    },
    /// Fine-tune on one dataset, writing a checkpoint and a metrics log.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fine-tune on a domain sequence and report OP/PD.
    Continual {
        #[arg(long)]
        config: PathBuf,
    },
    /// Redundancy and routing reports for a checkpoint, or OP/PD for a
    /// stored accuracy matrix.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[arg(long, conflicts_with = "matrix", required_unless_present = "matrix")]
    pub checkpoint: Option<PathBuf>,
    /// Accuracy matrix CSV (rows are training stages).
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    /// Task kind (`copy`, `modular_add:7`, ...) or a JSONL path for router statistics.
    #[arg(long, requires = "checkpoint")]
    pub dataset: Option<String>,
    #[arg(long, default_value_t = 120)]
    pub dataset_size: usize,
    #[arg(long, default_value_t = 0)]
    pub dataset_seed: u64,
    #[arg(long, default_value = "csv", value_parser = parse_format)]
    pub format: ReportFormat,
    /// `product` compares A·B, `raw` compares the factors.
    #[arg(long, default_value = "product", value_parser = parse_comparand)]
    pub comparand: Comparand,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    s.parse()
}

fn parse_comparand(s: &str) -> Result<Comparand, String> {
    match s {
        "product" => Ok(Comparand::Product),
        "raw" | "raw_factors" => Ok(Comparand::RawFactors),
        other => Err(format!("unknown comparand `{other}` (product or raw)")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Params { dims, alloc } => commands::params(&dims, &alloc),
        Command::Train { config } => commands::train(&config),
        Command::Continual { config } => commands::continual(&config),
        Command::Analyze(args) => commands::analyze(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
