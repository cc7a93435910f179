//! `tastas`: synthesise mixtures, train, evaluate and tabulate results.

mod commands;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "tastas", version, about = "Multi-stage speaker-aware speech separation")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build train/valid/test manifests and WAV trees.
    Synth(SynthArgs),
    /// Run the multi-step training pipeline (or the naive joint baseline).
    Train(TrainArgs),
    /// Score a checkpoint bundle on a test manifest.
    Eval(EvalArgs),
    /// Tabulate one or more evaluation summaries.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["toy", "corpus"]))]
pub struct SynthArgs {
    /// Generate a synthetic harmonic-tone corpus.
    #[arg(long)]
    pub toy: bool,
    /// Corpus directory laid out as <root>/<speaker>/<utterance>.wav.
    #[arg(long, value_name = "DIR")]
    pub corpus: Option<PathBuf>,
    /// Toy corpus: number of speakers.
    #[arg(long, default_value_t = 8)]
    pub speakers: usize,
    /// Toy corpus: utterances per speaker.
    #[arg(long, default_value_t = 12)]
    pub utts: usize,
    /// Toy corpus: utterance length in seconds.
    #[arg(long, default_value_t = 1.0)]
    pub duration: f64,
    /// Sources per mixture.
    #[arg(long = "s", value_name = "S", default_value_t = 2)]
    pub num_sources: usize,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 40)]
    pub valid: usize,
    #[arg(long, default_value_t = 40)]
    pub test: usize,
    /// Speakers held out for the test split (default: S).
    #[arg(long)]
    pub test_speakers: Option<usize>,
    /// Fraction of each training speaker's utterances kept for validation.
    #[arg(long, default_value_t = 0.25)]
    pub valid_fraction: f64,
    /// SNR range in dB of sources 2..S relative to source 1.
    #[arg(long, num_args = 2, value_names = ["LOW", "HIGH"], default_values_t = [0.0, 5.0], allow_negative_numbers = true)]
    pub snr: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Write manifests only.
    #[arg(long)]
    pub no_wav: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Model spec, e.g. "TasTas(I, 2, 2)".
    #[arg(long)]
    pub spec: Option<String>,
    /// Train every component jointly from scratch instead.
    #[arg(long)]
    pub naive: bool,
    /// Enable online remixing.
    #[arg(long)]
    pub remix: bool,
    /// Continue after the last completed step in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, value_name = "FILE")]
    pub train_manifest: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub valid_manifest: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Any config key, e.g. `--set max_epochs=5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint bundle (the last step's .ckpt).
    #[arg(long, value_name = "FILE", required_unless_present = "self_test")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Add the ideal-ratio-mask upper-bound row.
    #[arg(long)]
    pub oracle_irm: bool,
    /// Score the references themselves instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub self_test: bool,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// summary.json files written by `eval`.
    #[arg(required = true, value_name = "SUMMARY")]
    pub summaries: Vec<PathBuf>,
    /// Also write table.txt and table.json here.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

/// Exit status of a command.
#[derive(Debug)]
pub struct CommandResult {
    pub code: u8,
    pub summary: String,
    pub artifacts: Vec<PathBuf>,
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

impl CommandResult {
    pub fn ok(summary: String, artifacts: Vec<PathBuf>) -> Self {
        Self {
            code: 0,
            summary,
            artifacts,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            summary: msg.into(),
            artifacts: Vec::new(),
        }
    }

    pub fn runtime(msg: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_RUNTIME,
            summary: format!("error: {msg}"),
            artifacts: Vec::new(),
        }
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a, &argv),
        Command::Train(a) => commands::train(&a, &argv),
        Command::Eval(a) => commands::eval(&a, &argv),
        Command::Report(a) => commands::report(&a, &argv),
    };
    if result.code == 0 {
        println!("{}", result.summary);
        for p in &result.artifacts {
            log::info!("wrote {}", p.display());
        }
    } else {
        eprintln!("{}", result.summary);
    }
    ExitCode::from(result.code)
}
