use std::path::PathBuf;

use clap::Args;
use navkit_core::synth::{write_synthetic_dataset, SynthSpec};

use crate::error::CliError;

/// Write a seeded synthetic dataset (screenshots included) for smoke runs.
#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    #[arg(long, default_value_t = 540)]
    pub width: u32,
    #[arg(long, default_value_t = 1200)]
    pub height: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(a: SynthArgs) -> Result<(), CliError> {
    if a.steps == 0 || a.width < 8 || a.height < 8 {
        return Err(CliError::config("need at least one step and an 8x8 screen"));
    }
    let manifest = write_synthetic_dataset(
        &a.out,
        &SynthSpec {
            episodes: a.episodes,
            steps: a.steps,
            screen: (a.width, a.height),
            seed: a.seed,
        },
    )?;
    println!("{}", manifest.display());
    Ok(())
}
