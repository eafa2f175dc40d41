//! Command-line front end and HTTP service for the latent state tracking
//! model.
//!
//! `lstn <subcommand> [--config FILE] [flags]`; see `lstn --help`.

pub mod commands;
pub mod config;
pub mod run_dir;
pub mod server;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "lstn", version, about = "Latent state tracking dialog model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a raw corpus to the JSONL corpus format, optionally anonymizing it.
    Preprocess(PreprocessArgs),
    /// Train a model with EM and write it, its vocabulary and response cache to the run directory.
    Train(Common),
    /// Train the two-phase baseline into the run directory.
    TrainBaseline(Common),
    /// Score the run directory's model on a corpus split.
    Eval(Common),
    /// Train and score one model per state count.
    SweepK(SweepArgs),
    /// Mine intent classes and write the dialog-flow graph.
    ExportTree(Common),
    /// Compare analytic and finite-difference gradients of the training objective.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic corpus with gold states.
    Synth(Common),
    /// Serve chat sessions and model inspection over HTTP.
    Serve(ServeArgs),
}

/// Flags shared by every subcommand; each overrides the matching config key.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// `jsonl` or `plain`.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub num_states: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub m_steps: Option<usize>,
    #[arg(long)]
    pub min_count: Option<usize>,
    #[arg(long)]
    pub beam_size: Option<usize>,
    /// Accept hyperparameters outside the standard grids.
    #[arg(long)]
    pub allow_off_grid: bool,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub common: Common,
    /// Raw input file.
    #[arg(long)]
    pub input: PathBuf,
    /// `smd`, `camrest`, `jsonl` or `plain`.
    #[arg(long, default_value = "jsonl")]
    pub input_format: String,
    /// Split assigned to converted dialogs that carry none.
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated state counts.
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dialogs checked.
    #[arg(long, default_value_t = 3)]
    pub dialogs: usize,
    /// Turns kept per dialog.
    #[arg(long, default_value_t = 2)]
    pub turns: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub idle_timeout_secs: Option<u64>,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            1
        }
    }
}

/// The error and its causes joined by `: `, skipping causes that the
/// previous message already ends with.
pub fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.ends_with(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}
