use std::path::PathBuf;

use clap::Args;
use navkit_core::agent::{HistoryConfig, HistoryMode};
use navkit_core::dataset::Dataset;
use navkit_core::eval::{aggregate, run_evaluation, ContextSource, EvalConfig};
use navkit_core::model::{BackendProvider, HttpBackend, HttpConfig, ReplayProvider, ScriptedProvider};

use super::write_json;
use crate::config::{serde_value, BackendKind, FileConfig};
use crate::error::CliError;

const LONG_ABOUT: &str = "\
Runs a model over a dataset with teacher forcing and reports step accuracy,
task accuracy, per-action accuracy and efficiency.

Backends:
  replay    plays each step's primary action back (an oracle; SA = TA = 1)
  scripted  canned completions per episode from --script, a JSONL file of
            {\"episode\": ID, \"outputs\": [COMPLETION, ...]}
  http      an OpenAI-compatible streaming chat-completions endpoint; the
            [http] config table, NAVKIT_ENDPOINT, NAVKIT_API_KEY, NAVKIT_MODEL,
            NAVKIT_TIMEOUT_SECS and NAVKIT_MAX_IN_FLIGHT configure it

The dataset is a manifest.json or a bare episodes.jsonl (see FORMATS.md).
The JSON report goes to --output; a summary table is printed to stdout.";

/// Evaluate a model on a dataset.
#[derive(Debug, Args)]
#[command(long_about = LONG_ABOUT)]
pub struct EvaluateArgs {
    /// Dataset manifest or episodes JSONL.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// replay | scripted | http
    #[arg(long, value_parser = serde_value::<BackendKind>)]
    pub backend: Option<BackendKind>,
    /// Script file for the scripted backend.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Endpoint URL for the http backend.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Model name for the http backend.
    #[arg(long)]
    pub model: Option<String>,
    /// none | raw_history | semantic_context
    #[arg(long, value_parser = serde_value::<HistoryMode>)]
    pub mode: Option<HistoryMode>,
    /// History window: prior (screenshot, action) pairs in the prompt.
    #[arg(long)]
    pub n: Option<usize>,
    /// Leave the thought out of the history text.
    #[arg(long)]
    pub no_thought: bool,
    /// Permit a semantic_context window above 1.
    #[arg(long)]
    pub allow_wide_semantic_window: bool,
    /// self | annotated
    #[arg(long, value_parser = serde_value::<ContextSource>)]
    pub context_source: Option<ContextSource>,
    /// Episodes evaluated concurrently [default: logical cores].
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Re-asks after an unparseable completion.
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Where to write the JSON report.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Sampling seed forwarded to the http backend.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Settings after merging file and flags.
#[derive(Debug)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub backend: BackendKind,
    pub script: Option<PathBuf>,
    pub http: HttpConfig,
    pub eval: EvalConfig,
    pub parallelism: usize,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn resolve(args: EvaluateArgs, file: &FileConfig) -> Result<Self, CliError> {
        let f = &file.evaluate;
        let dataset = args
            .dataset
            .or_else(|| f.dataset.clone())
            .ok_or_else(|| CliError::config("no dataset given (--dataset)"))?;
        let backend = args
            .backend
            .or(f.backend)
            .ok_or_else(|| CliError::config("no backend given (--backend replay|scripted|http)"))?;
        let script = args.script.or_else(|| f.script.clone());
        match backend {
            BackendKind::Scripted if script.is_none() => {
                return Err(CliError::config("the scripted backend needs --script"));
            }
            BackendKind::Scripted => {}
            _ if script.is_some() => {
                return Err(CliError::config("--script only applies to the scripted backend"));
            }
            _ => {}
        }
        if backend != BackendKind::Http && (args.endpoint.is_some() || args.model.is_some()) {
            return Err(CliError::config("--endpoint and --model only apply to the http backend"));
        }

        let mut http = file.http.clone().unwrap_or_default().apply_env()?;
        if let Some(e) = args.endpoint {
            http.endpoint = e;
        }
        if let Some(m) = args.model {
            http.model = m;
        }
        if let Some(s) = args.seed.or(f.seed) {
            http.seed = Some(s);
        }

        let mode = args.mode.or(f.mode).unwrap_or(HistoryMode::SemanticContext);
        let window = args.n.or(f.n).unwrap_or(match mode {
            HistoryMode::None => 0,
            _ => 1,
        });
        let history = HistoryConfig {
            mode,
            window,
            include_thought: !args.no_thought && f.include_thought.unwrap_or(true),
            allow_wide_semantic_window: args.allow_wide_semantic_window
                || f.allow_wide_semantic_window.unwrap_or(false),
        };
        history
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        let defaults = EvalConfig::default();
        let eval = EvalConfig {
            history,
            context_source: args.context_source.or(f.context_source).unwrap_or_default(),
            max_retries: args.max_retries.or(f.max_retries).unwrap_or(defaults.max_retries),
            match_options: defaults.match_options,
        };
        let parallelism = args.parallelism.or(f.parallelism).unwrap_or_else(|| {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        });
        if parallelism == 0 {
            return Err(CliError::config("--parallelism must be at least 1"));
        }
        Ok(RunConfig {
            dataset,
            backend,
            script,
            http,
            eval,
            parallelism,
            output: args.output.or_else(|| f.output.clone()),
        })
    }
}

pub fn run(args: EvaluateArgs, file: &FileConfig) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(args, file)?;
    let dataset = Dataset::load(&cfg.dataset)?;
    let provider: Box<dyn BackendProvider> = match cfg.backend {
        BackendKind::Replay => Box::new(ReplayProvider),
        BackendKind::Scripted => Box::new(ScriptedProvider::load(cfg.script.as_deref().expect("checked"))?),
        BackendKind::Http => Box::new(HttpBackend::new(cfg.http.clone())?),
    };
    let results = run_evaluation(&dataset, provider.as_ref(), &cfg.eval, cfg.parallelism)?;
    let report = aggregate(&results)?;
    if let Some(out) = &cfg.output {
        write_json(out, &report)?;
    }
    print!("{}", report.render_table());
    Ok(())
}
