mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "ssp",
    version,
    about = "Self-supervised prompting for zero-labelled cross-lingual transfer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML (or .json) run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a config value, e.g. --set k=4 --set task.preset=ner.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Response cache directory.
    #[arg(long, global = true, default_value = "cache")]
    pub cache_dir: PathBuf,

    /// Offline backend: echo-gold, copy-nearest-exemplar or scripted.
    #[arg(long, global = true)]
    pub mock: Option<String>,

    /// Render prompts and trace selections without calling any model.
    #[arg(long, global = true)]
    pub dry_run: bool,

    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,

    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fetch and store embeddings for the source and target sets.
    Embed,
    /// Label the target set (in-context learning, import or gold).
    Stage1,
    /// Validate external Stage I predictions and pool them.
    ImportStage1,
    /// Trace exemplar selection for every target example, without model calls.
    Select,
    /// Re-label the target set with selected in-language exemplars.
    Stage2,
    /// Score a prediction file against the target gold labels.
    Eval(EvalArgs),
    /// Stage II quality against injected label noise.
    NoiseExp,
    /// Stage II under every selector mode, with deltas against the full selector.
    Ablate,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predictions to score; defaults to the run's stage2.preds.jsonl.
    #[arg(long)]
    pub preds: Option<PathBuf>,
    /// Second prediction file; writes the confusion-matrix difference.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Selection trace for exemplar precision.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Pool predictions the trace's exemplars were labelled with.
    #[arg(long)]
    pub pool: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
