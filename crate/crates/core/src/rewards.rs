//! Rule-based rewards and GRPO arithmetic.
//!
//! Everything here is a pure function: scoring completions against gold
//! choices, group-normalising rewards into advantages, and evaluating the
//! clipped token-level objective from precomputed ratio and KL traces.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::parse_turn_output;
use crate::eval::{match_action_with, GoldChoice, MatchOptions};

pub const FORMAT_REWARD: f64 = 0.5;
pub const ACTION_REWARD: f64 = 1.0;
pub const DEFAULT_STD_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("group of {size} is too small; need at least 2")]
    GroupTooSmall { size: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid GRPO config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format_reward: f64,
    pub action_reward: f64,
    pub total: f64,
}

pub fn compute_reward(raw_output: &str, gold_choices: &[GoldChoice]) -> RewardBreakdown {
    compute_reward_with(raw_output, gold_choices, MatchOptions::default())
}

pub fn compute_reward_with(
    raw_output: &str,
    gold_choices: &[GoldChoice],
    opts: MatchOptions,
) -> RewardBreakdown {
    let (format_reward, action_reward) = match parse_turn_output(raw_output) {
        Ok(out) if match_action_with(&out.action, gold_choices, opts) => (FORMAT_REWARD, ACTION_REWARD),
        Ok(_) => (FORMAT_REWARD, 0.0),
        Err(_) => (0.0, 0.0),
    };
    RewardBreakdown {
        format_reward,
        action_reward,
        total: format_reward + action_reward,
    }
}

/// `(R_i - mean) / std` with the population std. Groups whose std is below
/// `std_epsilon` get all-zero advantages.
pub fn group_advantages(rewards: &[f64], std_epsilon: f64) -> Result<Vec<f64>, RewardError> {
    if rewards.len() < 2 {
        return Err(RewardError::GroupTooSmall { size: rewards.len() });
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(RewardError::InvalidInput(format!("non-finite reward {r}")));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < std_epsilon {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta: f64,
    pub group_size: usize,
    pub std_epsilon: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            eps_low: 0.2,
            eps_high: 0.28,
            beta: 0.04,
            group_size: 16,
            std_epsilon: DEFAULT_STD_EPSILON,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.eps_low > 0.0 && self.eps_low <= self.eps_high && self.eps_high.is_finite()) {
            return Err(RewardError::InvalidConfig(format!(
                "need 0 < eps_low <= eps_high, got {} and {}",
                self.eps_low, self.eps_high
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(RewardError::InvalidConfig(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.group_size < 2 {
            return Err(RewardError::InvalidConfig(format!(
                "group_size must be >= 2, got {}",
                self.group_size
            )));
        }
        if !(self.std_epsilon > 0.0) {
            return Err(RewardError::InvalidConfig("std_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// One sampled response: its reward and per-token probability ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub reward: f64,
    pub ratios: Vec<f64>,
}

/// Clipped surrogate for one token, before the KL penalty.
pub fn clipped_term(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
    (ratio * advantage).min(clipped * advantage)
}

/// Token-level normalised objective:
/// `(1/Σ|o_i|) Σ_i Σ_t [min(r·A, clip(r)·A) − β·kl]`.
pub fn grpo_objective(
    samples: &[GroupSample],
    advantages: &[f64],
    kl_terms: &[Vec<f64>],
    cfg: &GrpoConfig,
) -> Result<f64, RewardError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(RewardError::ShapeMismatch("no samples".into()));
    }
    if advantages.len() != samples.len() || kl_terms.len() != samples.len() {
        return Err(RewardError::ShapeMismatch(format!(
            "{} samples, {} advantages, {} KL rows",
            samples.len(),
            advantages.len(),
            kl_terms.len()
        )));
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for (i, ((s, &a), kl)) in samples.iter().zip(advantages).zip(kl_terms).enumerate() {
        if s.ratios.is_empty() {
            return Err(RewardError::ShapeMismatch(format!("sample {i} has no tokens")));
        }
        if kl.len() != s.ratios.len() {
            return Err(RewardError::ShapeMismatch(format!(
                "sample {i}: {} ratios but {} KL terms",
                s.ratios.len(),
                kl.len()
            )));
        }
        for (&r, &k) in s.ratios.iter().zip(kl) {
            if !(r.is_finite() && r > 0.0) {
                return Err(RewardError::InvalidInput(format!("sample {i}: ratio {r}")));
            }
            if !(k.is_finite() && k >= 0.0) {
                return Err(RewardError::InvalidInput(format!("sample {i}: KL term {k}")));
            }
            total += clipped_term(r, a, cfg.eps_low, cfg.eps_high) - cfg.beta * k;
        }
        tokens += s.ratios.len();
    }
    Ok(total / tokens as f64)
}

/// One line of a batch scoring input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardRecord {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub group: Option<String>,
    pub output: String,
    pub gold_choices: Vec<GoldChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub id: Option<String>,
    pub group: Option<String>,
    #[serde(flatten)]
    pub reward: RewardBreakdown,
    pub advantage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupIssue {
    pub group: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchScores {
    pub records: Vec<ScoredRecord>,
    pub group_errors: Vec<GroupIssue>,
}

/// Scores every record and normalises rewards within each group id.
/// Records without a group get no advantage; a group that cannot be
/// normalised is reported and its members keep `advantage: None`.
pub fn score_batch(records: &[RewardRecord], std_epsilon: f64) -> BatchScores {
    let mut scored: Vec<ScoredRecord> = records
        .iter()
        .map(|r| ScoredRecord {
            id: r.id.clone(),
            group: r.group.clone(),
            reward: compute_reward(&r.output, &r.gold_choices),
            advantage: None,
        })
        .collect();

    let mut order: Vec<&str> = Vec::new();
    let mut members: std::collections::HashMap<&str, Vec<usize>> = Default::default();
    for (i, r) in records.iter().enumerate() {
        if let Some(g) = r.group.as_deref() {
            let entry = members.entry(g).or_default();
            if entry.is_empty() {
                order.push(g);
            }
            entry.push(i);
        }
    }
    let mut group_errors = Vec::new();
    for g in order {
        let idx = &members[g];
        let rewards: Vec<f64> = idx.iter().map(|&i| scored[i].reward.total).collect();
        match group_advantages(&rewards, std_epsilon) {
            Ok(adv) => {
                for (&i, a) in idx.iter().zip(adv) {
                    scored[i].advantage = Some(a);
                }
            }
            Err(e) => group_errors.push(GroupIssue {
                group: g.to_string(),
                error: e.to_string(),
            }),
        }
    }
    BatchScores {
        records: scored,
        group_errors,
    }
}
