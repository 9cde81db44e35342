//! Per-step agent policy: prompt assembly and triplet parsing.
//!
//! Three history formulations are supported:
//!
//! * `none` conditions on the instruction and the current screenshot only;
//! * `raw_history` adds the last `N` (screenshot, action) pairs;
//! * `semantic_context` adds the previous turn's running summary plus the
//!   last (screenshot, action) pair.
//!
//! The model answers with a JSON object carrying the updated summary, a
//! thought and one tool-call action.

use std::collections::VecDeque;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::action::{serialize_action, Action, ActionError};
use crate::dataset::ImageRef;
use crate::model::{BackendError, ModelBackend, Timing, TokenUsage};

/// Previous-context value at the first step of an episode.
pub const START_SENTINEL: &str = "(start of task)";
/// Marks where each image sits in the prompt text.
pub const IMAGE_TOKEN: &str = "<image>";
/// Re-invocations of the backend after an unparseable completion.
pub const DEFAULT_RETRIES: u32 = 2;

const PROMPTS_V1: &str = include_str!("../assets/prompts/v1.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    None,
    RawHistory,
    SemanticContext,
}

impl HistoryMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            HistoryMode::None => "none",
            HistoryMode::RawHistory => "raw_history",
            HistoryMode::SemanticContext => "semantic_context",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryConfig {
    pub mode: HistoryMode,
    /// Prior (screenshot, action) pairs shown to the model.
    pub window: usize,
    pub include_thought: bool,
    /// Permits `window > 1` in semantic-context mode, for ablations.
    #[serde(default)]
    pub allow_wide_semantic_window: bool,
}

impl HistoryConfig {
    pub fn none() -> Self {
        HistoryConfig {
            mode: HistoryMode::None,
            window: 0,
            include_thought: true,
            allow_wide_semantic_window: false,
        }
    }

    pub fn raw_history(window: usize) -> Self {
        HistoryConfig {
            mode: HistoryMode::RawHistory,
            window,
            ..Self::none()
        }
    }

    pub fn semantic_context() -> Self {
        HistoryConfig {
            mode: HistoryMode::SemanticContext,
            window: 1,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        match self.mode {
            HistoryMode::None if self.window != 0 => Err(AgentError::InvalidConfig(format!(
                "mode none requires window 0, got {}",
                self.window
            ))),
            HistoryMode::SemanticContext if self.window > 1 && !self.allow_wide_semantic_window => {
                Err(AgentError::InvalidConfig(format!(
                    "semantic_context window {} > 1 needs allow_wide_semantic_window",
                    self.window
                )))
            }
            _ => Ok(()),
        }
    }
}

impl Default for HistoryConfig {
    fn default() -> Self {
        Self::semantic_context()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryItem {
    pub screenshot: ImageRef,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentTurnInput {
    pub instruction: String,
    pub current_screenshot: ImageRef,
    /// [`START_SENTINEL`] at the first step.
    pub prev_context: String,
    /// Newest first.
    pub history: Vec<HistoryItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTurnOutput {
    pub semantic_context: String,
    pub thought: String,
    pub action: Action,
}

impl AgentTurnOutput {
    /// The completion text a well-behaved model would produce.
    pub fn to_completion_text(&self) -> String {
        serde_json::to_string(self).expect("triplet serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    /// History screenshots oldest first, then the current screenshot.
    pub images: Vec<ImageRef>,
}

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("history has {got} entries but the configured window is {window}")]
    ConfigMismatch { got: usize, window: usize },
    #[error("invalid history config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TripletFormatError {
    #[error("no JSON object found in model output")]
    NoJsonObject,
    #[error("triplet is missing `{0}`")]
    MissingField(&'static str),
    #[error("`{0}` must be a string")]
    NotAString(&'static str),
    #[error("invalid action: {0}")]
    Action(#[from] ActionError),
}

#[derive(Debug, Error)]
#[error("prompt template: {0}")]
pub struct TemplateError(String);

/// Prompt text assets. Sections are delimited by `=== name ===` lines and
/// use `{placeholder}` substitution.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    system: String,
    output_contract: String,
    output_contract_no_thought: String,
    user: String,
    context: String,
    history: String,
    previous: String,
}

impl PromptTemplates {
    pub fn v1() -> &'static PromptTemplates {
        static V1: OnceLock<PromptTemplates> = OnceLock::new();
        V1.get_or_init(|| PromptTemplates::parse(PROMPTS_V1).expect("bundled templates parse"))
    }

    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        let mut sections: Vec<(String, String)> = Vec::new();
        for line in text.lines() {
            if let Some(name) = line
                .strip_prefix("=== ")
                .and_then(|l| l.strip_suffix(" ==="))
            {
                sections.push((name.trim().to_string(), String::new()));
            } else if let Some((_, body)) = sections.last_mut() {
                body.push_str(line);
                body.push('\n');
            } else if !line.trim().is_empty() {
                return Err(TemplateError("text before the first section".into()));
            }
        }
        let mut take = |name: &str| {
            sections
                .iter()
                .position(|(n, _)| n == name)
                .map(|i| sections.swap_remove(i).1)
                .ok_or_else(|| TemplateError(format!("missing section `{name}`")))
        };
        Ok(PromptTemplates {
            system: take("system")?,
            output_contract: take("output_contract")?,
            output_contract_no_thought: take("output_contract_no_thought")?,
            user: take("user")?,
            context: take("context")?,
            history: take("history")?,
            previous: take("previous")?,
        })
    }
}

/// Single-pass `{name}` substitution; substituted values are not rescanned
/// and unknown placeholders are left as-is.
fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_len = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(after.len());
        let value = (name_len > 0 && after[name_len..].starts_with('}'))
            .then(|| vars.iter().find(|(n, _)| *n == &after[..name_len]))
            .flatten();
        match value {
            Some((_, v)) => {
                out.push_str(v);
                rest = &after[name_len + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn build_prompt(input: &AgentTurnInput, cfg: &HistoryConfig) -> Result<PromptBundle, AgentError> {
    build_prompt_with(PromptTemplates::v1(), input, cfg)
}

pub fn build_prompt_with(
    templates: &PromptTemplates,
    input: &AgentTurnInput,
    cfg: &HistoryConfig,
) -> Result<PromptBundle, AgentError> {
    cfg.validate()?;
    if input.history.len() > cfg.window {
        return Err(AgentError::ConfigMismatch {
            got: input.history.len(),
            window: cfg.window,
        });
    }

    let contract = if cfg.include_thought {
        &templates.output_contract
    } else {
        &templates.output_contract_no_thought
    };
    let system_text = render(&templates.system, &[("output_contract", contract.trim_end())]);

    let mut sections = String::new();
    let mut images = Vec::with_capacity(input.history.len() + 1);
    if cfg.mode == HistoryMode::SemanticContext {
        sections.push_str(&render(
            &templates.context,
            &[("previous_context", &input.prev_context)],
        ));
    }
    match (cfg.mode, input.history.len()) {
        (HistoryMode::None, _) | (_, 0) => {}
        (HistoryMode::SemanticContext, 1) => {
            let item = &input.history[0];
            sections.push_str(&render(
                &templates.previous,
                &[("action", &serialize_action(&item.action))],
            ));
            images.push(item.screenshot.clone());
        }
        _ => {
            for (pos, item) in input.history.iter().rev().enumerate() {
                let position = (pos + 1).to_string();
                sections.push_str(&render(
                    &templates.history,
                    &[
                        ("position", &position),
                        ("action", &serialize_action(&item.action)),
                    ],
                ));
                images.push(item.screenshot.clone());
            }
        }
    }
    images.push(input.current_screenshot.clone());

    let user_text = render(
        &templates.user,
        &[("instruction", &input.instruction), ("sections", &sections)],
    );
    Ok(PromptBundle {
        system_text,
        user_text,
        images,
    })
}

/// Finds the first balanced `{...}` span that parses as a JSON object.
fn first_json_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    let bytes = raw.as_bytes();
    let mut search_from = 0;
    while let Some(offset) = raw[search_from..].find('{') {
        let start = search_from + offset;
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        let mut end = None;
        for (i, &b) in bytes.iter().enumerate().skip(start) {
            if in_string {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_string = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_string = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(i);
                        break;
                    }
                }
                _ => {}
            }
        }
        let Some(end) = end else {
            search_from = start + 1;
            continue;
        };
        if let Ok(Value::Object(map)) = serde_json::from_str(&raw[start..=end]) {
            return Some(map);
        }
        search_from = start + 1;
    }
    None
}

/// Parses a completion into the (context, thought, action) triplet. Prose
/// and code fences around the object are ignored.
pub fn parse_turn_output(raw: &str) -> Result<AgentTurnOutput, TripletFormatError> {
    let obj = first_json_object(raw).ok_or(TripletFormatError::NoJsonObject)?;
    let text_field = |key: &'static str| match obj.get(key) {
        None => Err(TripletFormatError::MissingField(key)),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(TripletFormatError::NotAString(key)),
    };
    let semantic_context = text_field("semantic_context")?;
    let thought = text_field("thought")?;
    let action = match obj.get("action") {
        None => return Err(TripletFormatError::MissingField("action")),
        // some models emit the tool call as an embedded JSON string
        Some(Value::String(s)) => crate::action::parse_action(s)?,
        Some(v) => Action::from_value(v)?,
    };
    Ok(AgentTurnOutput {
        semantic_context,
        thought,
        action,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub usage: TokenUsage,
    pub timing: Timing,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TurnTelemetry {
    /// Every backend call made for this turn, retries included.
    pub calls: Vec<CallRecord>,
    pub retry_count: u32,
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("unparseable model output after {attempts} attempts: {error}")]
    Failure {
        raw: String,
        attempts: u32,
        error: TripletFormatError,
        telemetry: TurnTelemetry,
    },
}

/// Calls the backend until it yields a parseable triplet, re-invoking it up
/// to `max_retries` times.
pub fn run_turn(
    backend: &mut dyn ModelBackend,
    bundle: &PromptBundle,
    max_retries: u32,
) -> Result<(AgentTurnOutput, TurnTelemetry), StepError> {
    let mut telemetry = TurnTelemetry::default();
    let mut attempt = 0;
    loop {
        let completion = backend.complete(bundle)?;
        telemetry.calls.push(CallRecord {
            usage: completion.usage,
            timing: completion.timing,
        });
        match parse_turn_output(&completion.text) {
            Ok(out) => {
                telemetry.retry_count = attempt;
                return Ok((out, telemetry));
            }
            Err(error) if attempt >= max_retries => {
                telemetry.retry_count = attempt;
                return Err(StepError::Failure {
                    raw: completion.text,
                    attempts: attempt + 1,
                    error,
                    telemetry,
                });
            }
            Err(_) => attempt += 1,
        }
    }
}

/// A live agent loop for one episode. Carries the semantic context and the
/// (screenshot, action) history between steps.
#[derive(Debug, Clone)]
pub struct Agent {
    cfg: HistoryConfig,
    instruction: String,
    context: String,
    history: VecDeque<HistoryItem>,
    max_retries: u32,
}

impl Agent {
    pub fn new(instruction: impl Into<String>, cfg: HistoryConfig) -> Result<Self, AgentError> {
        cfg.validate()?;
        Ok(Agent {
            cfg,
            instruction: instruction.into(),
            context: START_SENTINEL.to_string(),
            history: VecDeque::new(),
            max_retries: DEFAULT_RETRIES,
        })
    }

    pub fn with_retries(mut self, max_retries: u32) -> Self {
        self.max_retries = max_retries;
        self
    }

    pub fn context(&self) -> &str {
        &self.context
    }

    pub fn input_for(&self, screenshot: ImageRef) -> AgentTurnInput {
        AgentTurnInput {
            instruction: self.instruction.clone(),
            current_screenshot: screenshot,
            prev_context: self.context.clone(),
            history: self.history.iter().cloned().collect(),
        }
    }

    /// Runs one turn on `screenshot` and advances the carried state.
    pub fn step(
        &mut self,
        backend: &mut dyn ModelBackend,
        screenshot: ImageRef,
    ) -> Result<(AgentTurnOutput, TurnTelemetry), StepError> {
        let input = self.input_for(screenshot.clone());
        let bundle = build_prompt(&input, &self.cfg)?;
        let (out, telemetry) = run_turn(backend, &bundle, self.max_retries)?;
        self.context = out.semantic_context.clone();
        if self.cfg.window > 0 {
            self.history.push_front(HistoryItem {
                screenshot,
                action: out.action.clone(),
            });
            self.history.truncate(self.cfg.window);
        }
        Ok((out, telemetry))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Completion, UsageSource};
    use std::path::PathBuf;

    fn img(name: &str) -> ImageRef {
        ImageRef {
            path: PathBuf::from(name),
            width: 1080,
            height: 2400,
        }
    }

    fn input(history: usize) -> AgentTurnInput {
        AgentTurnInput {
            instruction: "set an alarm for 8 am".into(),
            current_screenshot: img("cur.png"),
            prev_context: START_SENTINEL.into(),
            history: (0..history)
                .map(|i| HistoryItem {
                    screenshot: img(&format!("h{i}.png")),
                    action: Action::click(i as u32, 1),
                })
                .collect(),
        }
    }

    fn image_tokens(b: &PromptBundle) -> usize {
        b.user_text.matches(IMAGE_TOKEN).count()
    }

    #[test]
    fn first_step_semantic_has_one_image_and_sentinel() {
        let b = build_prompt(&input(0), &HistoryConfig::semantic_context()).unwrap();
        assert_eq!(b.images.len(), 1);
        assert!(b.user_text.contains(START_SENTINEL));
        assert_eq!(image_tokens(&b), 1);
    }

    #[test]
    fn raw_history_five() {
        let b = build_prompt(&input(5), &HistoryConfig::raw_history(5)).unwrap();
        assert_eq!(b.images.len(), 6);
        assert_eq!(image_tokens(&b), 6);
        // oldest first, current last
        assert_eq!(b.images[0].path, PathBuf::from("h4.png"));
        assert_eq!(b.images[4].path, PathBuf::from("h0.png"));
        assert_eq!(b.images[5].path, PathBuf::from("cur.png"));
        assert!(!b.user_text.contains("semantic context"));
    }

    #[test]
    fn semantic_with_previous_pair() {
        let mut inp = input(1);
        inp.prev_context = "Opened the clock app.".into();
        let b = build_prompt(&inp, &HistoryConfig::semantic_context()).unwrap();
        assert_eq!(b.images.len(), 2);
        assert!(b.user_text.contains("Opened the clock app."));
        assert!(b.user_text.contains(&serialize_action(&Action::click(0, 1))));
    }

    #[test]
    fn none_equals_raw_zero() {
        let a = build_prompt(&input(0), &HistoryConfig::none()).unwrap();
        let b = build_prompt(&input(0), &HistoryConfig::raw_history(0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn history_beyond_window_is_rejected() {
        let err = build_prompt(&input(2), &HistoryConfig::semantic_context()).unwrap_err();
        assert_eq!(err, AgentError::ConfigMismatch { got: 2, window: 1 });
        assert!(HistoryConfig {
            window: 3,
            ..HistoryConfig::semantic_context()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn no_unresolved_placeholders() {
        for cfg in [
            HistoryConfig::none(),
            HistoryConfig::raw_history(2),
            HistoryConfig::semantic_context(),
        ] {
            let b = build_prompt(&input(cfg.window), &cfg).unwrap();
            for name in ["{instruction}", "{sections}", "{action}", "{position}", "{output_contract}", "{previous_context}"] {
                assert!(!b.system_text.contains(name) && !b.user_text.contains(name), "{name}");
            }
        }
    }

    #[test]
    fn render_does_not_rescan_values() {
        let out = render("a {x} b {y}", &[("x", "{y}"), ("y", "Y")]);
        assert_eq!(out, "a {y} b Y");
        assert_eq!(render("{\"k\": 1} {missing}", &[]), "{\"k\": 1} {missing}");
    }

    const GOOD: &str = r#"{"semantic_context":"Opened settings.","thought":"Tap Wi-Fi.","action":{"name":"mobile_use","arguments":{"action":"click","coordinate":[10,20]}}}"#;

    #[test]
    fn parses_plain_and_fenced() {
        let out = parse_turn_output(GOOD).unwrap();
        assert_eq!(out.action, Action::click(10, 20));
        let fenced = format!("Sure! Here is my answer:\n```json\n{GOOD}\n```\nDone {{ok}}.");
        assert_eq!(parse_turn_output(&fenced).unwrap(), out);
    }

    #[test]
    fn missing_context_is_format_error() {
        let raw = r#"{"thought":"...","action":{"name":"mobile_use","arguments":{"action":"click","coordinate":[1,2]}}}"#;
        assert_eq!(
            parse_turn_output(raw).unwrap_err(),
            TripletFormatError::MissingField("semantic_context")
        );
        assert_eq!(parse_turn_output("no json").unwrap_err(), TripletFormatError::NoJsonObject);
    }

    #[test]
    fn braces_inside_strings() {
        let raw = r#"note {not json} {"semantic_context":"a } b","thought":"{","action":{"name":"mobile_use","arguments":{"action":"type","text":"}{"}}}"#;
        let out = parse_turn_output(raw).unwrap();
        assert_eq!(out.semantic_context, "a } b");
        assert_eq!(out.action, Action::type_text("}{").unwrap());
    }

    #[test]
    fn completion_text_round_trips() {
        let out = parse_turn_output(GOOD).unwrap();
        assert_eq!(parse_turn_output(&out.to_completion_text()).unwrap(), out);
    }

    struct Canned(Vec<String>, usize);

    impl ModelBackend for Canned {
        fn complete(&mut self, _: &PromptBundle) -> Result<Completion, BackendError> {
            let text = self.0[self.1.min(self.0.len() - 1)].clone();
            self.1 += 1;
            Ok(Completion {
                text,
                usage: TokenUsage {
                    prompt_text_tokens: 1,
                    prompt_vision_tokens: 0,
                    completion_tokens: 1,
                    source: UsageSource::Estimated,
                },
                timing: Timing::zero(),
            })
        }
    }

    #[test]
    fn retries_then_succeeds() {
        let mut b = Canned(vec!["garbage".into(), "more garbage".into(), GOOD.into()], 0);
        let bundle = build_prompt(&input(0), &HistoryConfig::none()).unwrap();
        let (_, tel) = run_turn(&mut b, &bundle, DEFAULT_RETRIES).unwrap();
        assert_eq!(tel.retry_count, 2);
        assert_eq!(tel.calls.len(), 3);
    }

    #[test]
    fn retry_exhaustion() {
        let mut b = Canned(vec!["garbage".into()], 0);
        let bundle = build_prompt(&input(0), &HistoryConfig::none()).unwrap();
        match run_turn(&mut b, &bundle, DEFAULT_RETRIES).unwrap_err() {
            StepError::Failure { raw, attempts, .. } => {
                assert_eq!(raw, "garbage");
                assert_eq!(attempts, 3);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn agent_threads_context() {
        let t1 = AgentTurnOutput {
            semantic_context: "C1".into(),
            thought: "x".into(),
            action: Action::click(1, 1),
        };
        let t2 = AgentTurnOutput {
            semantic_context: "C2".into(),
            ..t1.clone()
        };
        let mut b = Canned(vec![t1.to_completion_text(), t2.to_completion_text()], 0);
        let mut agent = Agent::new("task", HistoryConfig::semantic_context()).unwrap();
        agent.step(&mut b, img("1.png")).unwrap();
        assert_eq!(agent.context(), "C1");
        let next = build_prompt(&agent.input_for(img("2.png")), &HistoryConfig::semantic_context())
            .unwrap();
        assert!(next.user_text.contains("## Previous semantic context\nC1\n"));
        assert_eq!(next.images.len(), 2);
        agent.step(&mut b, img("2.png")).unwrap();
        assert_eq!(agent.context(), "C2");
    }
}
