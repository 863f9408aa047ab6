mod align;
mod config;
mod enhance;
mod eval;
mod gradcheck;
mod synth;
mod train;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Bad invocation or configuration; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(
    name = "mvlle",
    version,
    about = "Multi-view low-light image enhancement"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand that reads a run configuration.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// Line-delimited JSON configuration file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.units=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade normal-light triplets into a low-light training set.
    Synth(synth::SynthArgs),
    /// Train a model from a triplet manifest.
    Train(train::TrainArgs),
    /// Enhance one view of a triplet with a trained checkpoint.
    Enhance(enhance::EnhanceArgs),
    /// Compute quality and consistency metrics.
    Eval(eval::EvalArgs),
    /// Run the patch search on a triplet and visualize the matches.
    AlignInspect(align::AlignArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(gradcheck::GradcheckArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    let core = err.chain().find_map(|c| c.downcast_ref::<mvlle::Error>());
    match core {
        Some(mvlle::Error::NumericDomain(_)) => 3,
        _ => 2,
    }
}

/// Snapshot path for outputs written into a directory.
pub fn snapshot_in(dir: &Path) -> PathBuf {
    dir.join("resolved_config.jsonl")
}

/// Snapshot path for a single output file: `out.png` → `out.config.jsonl`.
pub fn snapshot_beside(file: &Path) -> PathBuf {
    file.with_extension("config.jsonl")
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
    let result = match cli.command {
        Command::Synth(a) => synth::run(a),
        Command::Train(a) => train::run(a),
        Command::Enhance(a) => enhance::run(a),
        Command::Eval(a) => eval::run(a),
        Command::AlignInspect(a) => align::run(a),
        Command::Gradcheck(a) => gradcheck::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
