use std::path::PathBuf;

use clap::Args;
use navkit_core::dataset::{read_jsonl, write_jsonl};
use navkit_core::rewards::{score_batch, RewardRecord, DEFAULT_STD_EPSILON};

use crate::config::FileConfig;
use crate::error::CliError;

const LONG_ABOUT: &str = "\
Scores model outputs with the rule-based reward: 0.5 for a well-formed
(semantic_context, thought, action) triplet plus 1 when the action matches a
gold choice. Records sharing a group id get group-normalised advantages.

Input: JSONL, one record per line:
  {\"id\": STR?, \"group\": STR?, \"output\": RAW_COMPLETION, \"gold_choices\": [CHOICE, ...]}
Output: JSONL in input order:
  {\"id\", \"group\", \"format_reward\", \"action_reward\", \"total\", \"advantage\"}
advantage is null for ungrouped records and for groups that cannot be
normalised (fewer than two members); those groups are reported on stderr.";

/// Score a batch of completions and compute group advantages.
#[derive(Debug, Args)]
#[command(long_about = LONG_ABOUT)]
pub struct RewardArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Groups whose reward std falls below this get zero advantages.
    #[arg(long)]
    pub std_epsilon: Option<f64>,
}

pub fn run(a: RewardArgs, file: &FileConfig) -> Result<(), CliError> {
    let eps = a.std_epsilon.or(file.reward.std_epsilon).unwrap_or(DEFAULT_STD_EPSILON);
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(CliError::config(format!("std_epsilon must be non-negative, got {eps}")));
    }
    let records: Vec<RewardRecord> = read_jsonl(&a.input)?;
    let scores = score_batch(&records, eps);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        super::create_dir(dir)?;
    }
    write_jsonl(&a.out, &scores.records)?;
    for g in &scores.group_errors {
        eprintln!("warning: group `{}`: {}", g.group, g.error);
    }
    let mean = scores.records.iter().map(|r| r.reward.total).sum::<f64>() / records.len().max(1) as f64;
    println!(
        "scored {} records, mean reward {mean:.4}, {} group errors",
        records.len(),
        scores.group_errors.len()
    );
    Ok(())
}
