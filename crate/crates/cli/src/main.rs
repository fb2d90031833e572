mod commands;
mod meta;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use partsight_core::Exec;

/// Synthetic part datasets, corruption suites, detection post-processing,
/// evaluation and the assistant service.
#[derive(Debug, Parser)]
#[command(name = "partsight", version, propagate_version = true)]
pub struct Cli {
    /// Run data-parallel stages on a single thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic dataset composition.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Corruption suites.
    #[command(subcommand)]
    Corrupt(CorruptCommand),
    /// Background-agnostic refinement.
    #[command(subcommand)]
    Bar(BarCommand),
    /// Detector runs.
    #[command(subcommand)]
    Detect(DetectCommand),
    /// Detection metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Knowledge base indexing and lookup.
    #[command(subcommand)]
    Kb(KbCommand),
    /// Run the HTTP session API.
    Serve(ServeArgs),
    /// Offline session replay.
    #[command(subcommand)]
    Session(SessionCommand),
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Compose images from masks and backgrounds.
    Generate(SynthArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory of mask PNGs with `.json` sidecars (searched recursively).
    #[arg(long)]
    pub masks: PathBuf,
    /// Directory of background images.
    #[arg(long)]
    pub backgrounds: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Composition config JSON; omitted fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum CorruptCommand {
    /// Write a clean copy plus one corrupted copy per spec of every image.
    Apply(CorruptArgs),
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    /// Split root (images/ + labels/) or a flat image directory.
    #[arg(long)]
    pub images: PathBuf,
    /// Corruption profile JSON; the built-in ten-spec profile by default.
    #[arg(long, alias = "profile")]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum BarCommand {
    /// Paste confident detections onto plain canvases.
    Refine(BarArgs),
}

#[derive(Debug, Args)]
pub struct BarArgs {
    #[arg(long)]
    pub images: PathBuf,
    /// Detection JSON-lines.
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Class list fixing label indices.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// Refinement config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    Mock,
    External,
}

#[derive(Debug, Subcommand)]
pub enum DetectCommand {
    /// Detect on every image of a directory.
    Run(DetectArgs),
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long, value_enum)]
    pub provider: ProviderKind,
    /// Split root (images/ + labels/) or an image directory.
    #[arg(long)]
    pub images: PathBuf,
    /// Label directory for the mock provider, if not next to the images.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// External detector command; the image path is appended.
    #[arg(long)]
    pub command: Option<String>,
    /// Detect config JSON (mock noise, TTA, slicing, fusion IoU).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub tta: bool,
    #[arg(long)]
    pub slice: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Score predictions against labels.
    Run(EvalArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub preds: PathBuf,
    /// Split root or its labels/ directory.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub classes: Option<PathBuf>,
    #[arg(long, default_value_t = partsight_core::evalmetrics::DEFAULT_CONFIDENCE)]
    pub conf: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum KbCommand {
    /// Embed a knowledge base into an index file.
    Index(KbIndexArgs),
    /// Nearest entries for a text.
    Query(KbQueryArgs),
}

#[derive(Debug, Args)]
pub struct KbIndexArgs {
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long, default_value_t = partsight_core::knowledge::DEFAULT_DIM)]
    pub dim: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct KbQueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub text: String,
    #[arg(long, default_value_t = 3)]
    pub top: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Knowledge index built by `kb index`.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// External detector command for frames posted as images.
    #[arg(long)]
    pub detector_command: Option<String>,
    /// Detect config JSON (TTA and slicing settings).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub tta: bool,
    #[arg(long)]
    pub slice: bool,
}

#[derive(Debug, Subcommand)]
pub enum SessionCommand {
    /// Replay a scenario file and write its transcript.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub scenario: PathBuf,
    /// Transcript path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_INTERNAL: u8 = 3;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let exec = if cli.sequential || !cfg!(feature = "parallel") {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    match commands::run(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
