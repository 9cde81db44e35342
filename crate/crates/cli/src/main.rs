//! `navkit`: evaluation, data pipeline, reward scoring and the annotation
//! service behind one binary.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod cmd;
mod config;
mod error;

use config::{FileConfig, ENV_CONFIG};
use error::{CliError, EXIT_CONFIG};

const AFTER_HELP: &str = "\
Exit codes: 0 ok, 1 I/O failure, 2 dataset or schema error, 3 backend error, 4 config error.
File formats are described in each subcommand's --help and in FORMATS.md.";

#[derive(Debug, Parser)]
#[command(name = "navkit", version, about = "Mobile GUI agent evaluation and data tooling", after_help = AFTER_HELP)]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, env = ENV_CONFIG)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    Evaluate(cmd::evaluate::EvaluateArgs),
    #[command(subcommand)]
    Pipeline(cmd::pipeline::PipelineCommand),
    Reward(cmd::reward::RewardArgs),
    Serve(cmd::serve::ServeArgs),
    Export(cmd::serve::ExportArgs),
    Synth(cmd::synth::SynthArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Evaluate(a) => cmd::evaluate::run(a, &file),
        Command::Pipeline(p) => cmd::pipeline::run(p, &file),
        Command::Reward(a) => cmd::reward::run(a, &file),
        Command::Serve(a) => cmd::serve::run(a, &file),
        Command::Export(a) => cmd::serve::export(a),
        Command::Synth(a) => cmd::synth::run(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors are config errors; --help and --version are not errors
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
