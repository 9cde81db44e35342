//! Offline step-wise evaluation.
//!
//! Each step is evaluated with gold history: the previous screenshot and
//! action shown to the agent are always the dataset's, so one wrong step
//! does not corrupt the inputs of the next. Only the carried semantic
//! context may come from the model itself (`ContextSource::SelfGenerated`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, ActionKind};
use crate::agent::{
    build_prompt, run_turn, AgentError, AgentTurnInput, CallRecord, HistoryConfig, HistoryItem,
    StepError, DEFAULT_RETRIES, START_SENTINEL,
};
use crate::dataset::{resolve_screenshot, Dataset, DatasetError, Episode};
use crate::model::{BackendError, BackendProvider, ModelBackend, UsageSource};

pub mod matching;

pub use matching::{match_action, match_action_with, GoldChoice, MatchOptions};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("backend failed on episode `{episode}` step {step}: {source}")]
    Backend {
        episode: String,
        step: u32,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Config(#[from] AgentError),
    #[error("nothing was evaluated")]
    EmptyDataset,
}

/// Where the previous semantic context comes from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSource {
    /// The model's own output at the previous step.
    #[default]
    #[serde(rename = "self")]
    SelfGenerated,
    /// The dataset's `annotated_context` of the previous step.
    Annotated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub history: HistoryConfig,
    pub context_source: ContextSource,
    pub max_retries: u32,
    #[serde(default)]
    pub match_options: MatchOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            history: HistoryConfig::semantic_context(),
            context_source: ContextSource::SelfGenerated,
            max_retries: DEFAULT_RETRIES,
            match_options: MatchOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepVerdict {
    pub index: u32,
    /// Kind of the gold primary action.
    pub gold_kind: ActionKind,
    pub correct: bool,
    pub parse_failure: bool,
    pub retries: u32,
    pub predicted: Option<Action>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub id: String,
    pub app: String,
    pub verdicts: Vec<StepVerdict>,
    pub calls: Vec<CallRecord>,
}

impl EpisodeResult {
    pub fn all_correct(&self) -> bool {
        self.verdicts.iter().all(|v| v.correct)
    }
}

/// Runs one episode through `backend` and scores every step.
pub fn evaluate_episode(
    episode: &Episode,
    image_root: &Path,
    backend: &mut dyn ModelBackend,
    cfg: &EvalConfig,
) -> Result<EpisodeResult, EvalError> {
    cfg.history.validate()?;
    episode.validate()?;
    let screenshots = episode
        .steps
        .iter()
        .map(|s| resolve_screenshot(image_root, episode, s))
        .collect::<Result<Vec<_>, _>>()?;

    let mut verdicts = Vec::with_capacity(episode.steps.len());
    let mut calls = Vec::new();
    let mut carried = START_SENTINEL.to_string();

    for (t, step) in episode.steps.iter().enumerate() {
        let prev_context = match (t, cfg.context_source) {
            (0, _) => START_SENTINEL.to_string(),
            (_, ContextSource::SelfGenerated) => carried.clone(),
            (_, ContextSource::Annotated) => {
                let prev = &episode.steps[t - 1];
                prev.annotated_context.clone().ok_or_else(|| DatasetError::Invariant {
                    episode: episode.id.clone(),
                    step: Some(prev.index),
                    message: "annotated context source selected but annotated_context is missing"
                        .into(),
                })?
            }
        };
        let history = (1..=cfg.history.window.min(t))
            .map(|i| HistoryItem {
                screenshot: screenshots[t - i].clone(),
                action: episode.steps[t - i].primary_action.clone(),
            })
            .collect();
        let input = AgentTurnInput {
            instruction: episode.instruction.clone(),
            current_screenshot: screenshots[t].clone(),
            prev_context,
            history,
        };
        let bundle = build_prompt(&input, &cfg.history)?;

        let gold_kind = step.primary_action.kind();
        match run_turn(backend, &bundle, cfg.max_retries) {
            Ok((out, telemetry)) => {
                calls.extend(telemetry.calls);
                let correct = match_action_with(&out.action, &step.gold_choices, cfg.match_options);
                carried = out.semantic_context;
                verdicts.push(StepVerdict {
                    index: step.index,
                    gold_kind,
                    correct,
                    parse_failure: false,
                    retries: telemetry.retry_count,
                    predicted: Some(out.action),
                });
            }
            Err(StepError::Failure { telemetry, .. }) => {
                calls.extend(telemetry.calls);
                verdicts.push(StepVerdict {
                    index: step.index,
                    gold_kind,
                    correct: false,
                    parse_failure: true,
                    retries: telemetry.retry_count,
                    predicted: None,
                });
            }
            Err(StepError::Backend(source)) => {
                return Err(EvalError::Backend {
                    episode: episode.id.clone(),
                    step: step.index,
                    source,
                })
            }
            Err(StepError::Agent(e)) => return Err(e.into()),
        }
    }
    Ok(EpisodeResult {
        id: episode.id.clone(),
        app: episode.app.clone(),
        verdicts,
        calls,
    })
}

/// Evaluates every episode, up to `parallelism` at a time. Results come back
/// in dataset order regardless of completion order.
pub fn run_evaluation(
    dataset: &Dataset,
    provider: &dyn BackendProvider,
    cfg: &EvalConfig,
    parallelism: usize,
) -> Result<Vec<EpisodeResult>, EvalError> {
    let run_one = |ep: &Episode| -> Result<EpisodeResult, EvalError> {
        let mut backend = provider
            .backend_for(ep)
            .map_err(|source| EvalError::Backend {
                episode: ep.id.clone(),
                step: 0,
                source,
            })?;
        evaluate_episode(ep, &dataset.image_root, &mut backend, cfg)
    };
    let results: Vec<Result<EpisodeResult, EvalError>> = if parallelism <= 1 {
        dataset.episodes.iter().map(run_one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .expect("thread pool");
        pool.install(|| dataset.episodes.par_iter().map(run_one).collect())
    };
    results.into_iter().collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub correct: u64,
    pub total: u64,
    /// `None` when `total` is zero.
    pub value: Option<f64>,
}

impl Ratio {
    pub fn new(correct: u64, total: u64) -> Self {
        Ratio {
            correct,
            total,
            value: (total > 0).then(|| correct as f64 / total as f64),
        }
    }

    fn add(&mut self, correct: bool) {
        *self = Ratio::new(self.correct + u64::from(correct), self.total + 1);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerActionAccuracy {
    pub click: Ratio,
    #[serde(rename = "type")]
    pub type_: Ratio,
    pub swipe: Ratio,
    pub terminate: Ratio,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub calls: u64,
    pub mean_itc: Option<f64>,
    pub mean_ttft: Option<f64>,
    pub mean_tps: Option<f64>,
    pub server_reported_calls: u64,
    pub estimated_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppBreakdown {
    pub step_accuracy: Ratio,
    pub task_accuracy: Ratio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub id: String,
    pub app: String,
    pub steps: u64,
    pub correct_steps: u64,
    pub all_correct: bool,
    pub parse_failures: u64,
    pub verdicts: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step_accuracy: Ratio,
    pub task_accuracy: Ratio,
    /// Conditioned on the type of the gold primary action; waits and system
    /// buttons count towards SA/TA only.
    pub per_action: PerActionAccuracy,
    pub parse_failures: Ratio,
    pub efficiency: Efficiency,
    pub per_app: BTreeMap<String, AppBreakdown>,
    pub per_episode: Vec<EpisodeSummary>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0u64), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Reduces per-episode results into dataset-level metrics.
pub fn aggregate(results: &[EpisodeResult]) -> Result<EvalReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut sa = Ratio::default();
    let mut ta = Ratio::default();
    let mut parse = Ratio::default();
    let mut per_action = PerActionAccuracy::default();
    let mut per_app: BTreeMap<String, AppBreakdown> = BTreeMap::new();
    let mut per_episode = Vec::with_capacity(results.len());

    for r in results {
        let app = per_app.entry(r.app.clone()).or_insert(AppBreakdown {
            step_accuracy: Ratio::default(),
            task_accuracy: Ratio::default(),
        });
        for v in &r.verdicts {
            sa.add(v.correct);
            app.step_accuracy.add(v.correct);
            parse.add(v.parse_failure);
            let column = match v.gold_kind {
                ActionKind::Click => Some(&mut per_action.click),
                ActionKind::Type => Some(&mut per_action.type_),
                ActionKind::Swipe => Some(&mut per_action.swipe),
                ActionKind::Terminate => Some(&mut per_action.terminate),
                ActionKind::SystemButton | ActionKind::Wait => None,
            };
            if let Some(c) = column {
                c.add(v.correct);
            }
        }
        let all = r.all_correct();
        ta.add(all);
        app.task_accuracy.add(all);
        per_episode.push(EpisodeSummary {
            id: r.id.clone(),
            app: r.app.clone(),
            steps: r.verdicts.len() as u64,
            correct_steps: r.verdicts.iter().filter(|v| v.correct).count() as u64,
            all_correct: all,
            parse_failures: r.verdicts.iter().filter(|v| v.parse_failure).count() as u64,
            verdicts: r.verdicts.iter().map(|v| v.correct).collect(),
        });
    }
    if sa.total == 0 {
        return Err(EvalError::EmptyDataset);
    }

    let calls: Vec<&CallRecord> = results.iter().flat_map(|r| &r.calls).collect();
    let efficiency = Efficiency {
        calls: calls.len() as u64,
        mean_itc: mean(calls.iter().map(|c| c.usage.itc() as f64)),
        mean_ttft: mean(calls.iter().map(|c| c.timing.ttft)),
        mean_tps: mean(calls.iter().map(|c| c.timing.tps)),
        server_reported_calls: calls
            .iter()
            .filter(|c| c.usage.source == UsageSource::ServerReported)
            .count() as u64,
        estimated_calls: calls
            .iter()
            .filter(|c| c.usage.source == UsageSource::Estimated)
            .count() as u64,
    };
    Ok(EvalReport {
        step_accuracy: sa,
        task_accuracy: ta,
        per_action,
        parse_failures: parse,
        efficiency,
        per_app,
        per_episode,
    })
}

fn pct(r: &Ratio) -> String {
    match r.value {
        Some(v) => format!("{:>6.1}% ({}/{})", v * 100.0, r.correct, r.total),
        None => "     -".to_string(),
    }
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map(|v| format!("{v:.digits$}")).unwrap_or_else(|| "-".into())
}

impl EvalReport {
    /// Human-readable summary table.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<22} {}", "Step accuracy (SA)", pct(&self.step_accuracy));
        let _ = writeln!(s, "{:<22} {}", "Task accuracy (TA)", pct(&self.task_accuracy));
        let _ = writeln!(s, "{:<22} {}", "Click accuracy", pct(&self.per_action.click));
        let _ = writeln!(s, "{:<22} {}", "Type accuracy", pct(&self.per_action.type_));
        let _ = writeln!(s, "{:<22} {}", "Swipe accuracy", pct(&self.per_action.swipe));
        let _ = writeln!(s, "{:<22} {}", "Terminate accuracy", pct(&self.per_action.terminate));
        let _ = writeln!(s, "{:<22} {}", "Parse failures", pct(&self.parse_failures));
        let e = &self.efficiency;
        let _ = writeln!(s, "{:<22} {}", "Model calls", e.calls);
        let _ = writeln!(s, "{:<22} {}", "Mean ITC", opt(e.mean_itc, 1));
        let _ = writeln!(s, "{:<22} {}", "Mean TTFT (s)", opt(e.mean_ttft, 4));
        let _ = writeln!(s, "{:<22} {}", "Mean TPS", opt(e.mean_tps, 1));
        if !self.per_app.is_empty() {
            let _ = writeln!(s, "\n{:<22} {:<22} {}", "App", "SA", "TA");
            for (app, b) in &self.per_app {
                let _ = writeln!(
                    s,
                    "{:<22} {:<22} {}",
                    app,
                    pct(&b.step_accuracy),
                    pct(&b.task_accuracy)
                );
            }
        }
        s
    }
}
