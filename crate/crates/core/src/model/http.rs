//! Streaming chat-completions client for any compatible inference server.
//!
//! Completions are always streamed: time-to-first-token is taken at the
//! first non-empty content delta. Server-reported usage is preferred; when
//! the stream carries none, usage is estimated from the prompt bundle.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agent::PromptBundle;
use crate::dataset::Episode;

use super::{
    estimate_prompt_usage, BackendError, BackendProvider, ByteHeuristic, Completion, ModelBackend,
    PixelBudget, Timing, TokenCounter, TokenUsage, UsageSource,
};

pub const ENV_ENDPOINT: &str = "NAVKIT_ENDPOINT";
pub const ENV_API_KEY: &str = "NAVKIT_API_KEY";
pub const ENV_MODEL: &str = "NAVKIT_MODEL";
pub const ENV_TIMEOUT: &str = "NAVKIT_TIMEOUT_SECS";
pub const ENV_MAX_IN_FLIGHT: &str = "NAVKIT_MAX_IN_FLIGHT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout_secs: f64,
    pub max_in_flight: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    pub pixel_budget: PixelBudget,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".to_string(),
            model: "default".to_string(),
            api_key: None,
            timeout_secs: 120.0,
            max_in_flight: 4,
            temperature: 0.0,
            max_tokens: 1024,
            seed: None,
            pixel_budget: PixelBudget::default(),
        }
    }
}

impl HttpConfig {
    /// Reads a TOML settings file.
    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `NAVKIT_*` environment overrides.
    pub fn apply_env(self) -> Result<Self, BackendError> {
        self.apply_overrides(|k| std::env::var(k).ok())
    }

    pub fn apply_overrides(
        mut self,
        lookup: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, BackendError> {
        if let Some(v) = lookup(ENV_ENDPOINT) {
            self.endpoint = v;
        }
        if let Some(v) = lookup(ENV_API_KEY) {
            self.api_key = Some(v);
        }
        if let Some(v) = lookup(ENV_MODEL) {
            self.model = v;
        }
        if let Some(v) = lookup(ENV_TIMEOUT) {
            self.timeout_secs = v
                .parse()
                .map_err(|_| BackendError::Config(format!("{ENV_TIMEOUT}={v} is not a number")))?;
        }
        if let Some(v) = lookup(ENV_MAX_IN_FLIGHT) {
            self.max_in_flight = v.parse().map_err(|_| {
                BackendError::Config(format!("{ENV_MAX_IN_FLIGHT}={v} is not an integer"))
            })?;
        }
        Ok(self)
    }

    fn validate(&self) -> Result<(), BackendError> {
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(BackendError::Config("timeout_secs must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(BackendError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(n: usize) -> Self {
        InFlight {
            available: Mutex::new(n),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.freed.notify_one();
    }
}

/// Cheap to clone; clones share the connection pool and the in-flight limit.
#[derive(Clone)]
pub struct HttpBackend {
    cfg: Arc<HttpConfig>,
    client: reqwest::blocking::Client,
    in_flight: Arc<InFlight>,
    counter: Arc<dyn TokenCounter>,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.cfg.endpoint)
            .field("model", &self.cfg.model)
            .finish_non_exhaustive()
    }
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(HttpBackend {
            in_flight: Arc::new(InFlight::new(cfg.max_in_flight)),
            cfg: Arc::new(cfg),
            client,
            counter: Arc::new(ByteHeuristic),
        })
    }

    /// Replaces the text-token estimator used when the server reports no usage.
    pub fn with_token_counter(mut self, counter: Arc<dyn TokenCounter>) -> Self {
        self.counter = counter;
        self
    }

    pub fn config(&self) -> &HttpConfig {
        &self.cfg
    }

    fn request_body(&self, bundle: &PromptBundle) -> Result<Value, BackendError> {
        let mut parts = vec![json!({"type": "text", "text": bundle.user_text})];
        for image in &bundle.images {
            parts.push(json!({
                "type": "image_url",
                "image_url": {"url": data_url(&image.path)?},
            }));
        }
        let mut body = json!({
            "model": self.cfg.model,
            "stream": true,
            "stream_options": {"include_usage": true},
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
            "messages": [
                {"role": "system", "content": bundle.system_text},
                {"role": "user", "content": parts},
            ],
        });
        if let Some(seed) = self.cfg.seed {
            body["seed"] = json!(seed);
        }
        Ok(body)
    }

    fn timeout_error(&self, detail: impl std::fmt::Display) -> BackendError {
        BackendError::Timeout {
            after: Duration::from_secs_f64(self.cfg.timeout_secs),
            detail: detail.to_string(),
        }
    }

    fn map_transport(&self, e: reqwest::Error) -> BackendError {
        if e.is_timeout() || e.is_connect() {
            self.timeout_error(e)
        } else {
            BackendError::StreamInterrupted(e.to_string())
        }
    }
}

fn media_type(path: &Path) -> &'static str {
    match image::ImageFormat::from_path(path) {
        Ok(image::ImageFormat::Jpeg) => "image/jpeg",
        Ok(image::ImageFormat::WebP) => "image/webp",
        Ok(image::ImageFormat::Gif) => "image/gif",
        _ => "image/png",
    }
}

fn data_url(path: &Path) -> Result<String, BackendError> {
    let bytes = fs::read(path).map_err(|e| BackendError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(format!(
        "data:{};base64,{}",
        media_type(path),
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

#[derive(Debug, Deserialize)]
struct ServerUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
    #[serde(default)]
    prompt_tokens_details: Option<PromptDetails>,
}

#[derive(Debug, Deserialize)]
struct PromptDetails {
    #[serde(default)]
    image_tokens: Option<u64>,
}

/// Server usage, copied verbatim. Servers that do not split prompt tokens
/// report everything under text; ITC is unaffected.
fn usage_from_server(u: &ServerUsage) -> TokenUsage {
    let vision = u
        .prompt_tokens_details
        .as_ref()
        .and_then(|d| d.image_tokens)
        .unwrap_or(0)
        .min(u.prompt_tokens);
    TokenUsage {
        prompt_text_tokens: u.prompt_tokens - vision,
        prompt_vision_tokens: vision,
        completion_tokens: u.completion_tokens,
        source: UsageSource::ServerReported,
    }
}

impl ModelBackend for HttpBackend {
    fn complete(&mut self, bundle: &PromptBundle) -> Result<Completion, BackendError> {
        let body = self.request_body(bundle)?;
        let _permit = self.in_flight.acquire();

        let start = Instant::now();
        let mut request = self.client.post(&self.cfg.endpoint).json(&body);
        if let Some(key) = &self.cfg.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| self.map_transport(e))?;
        let status = response.status();
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(BackendError::Http {
                status: status.as_u16(),
                body: text.chars().take(512).collect(),
            });
        }

        let mut text = String::new();
        let mut ttft = None;
        let mut usage = None;
        let mut finished = false;
        for line in BufReader::new(response).lines() {
            let line = line.map_err(|e| {
                if e.kind() == std::io::ErrorKind::TimedOut {
                    self.timeout_error(e)
                } else {
                    BackendError::StreamInterrupted(e.to_string())
                }
            })?;
            let Some(data) = line.strip_prefix("data:").map(str::trim) else {
                continue;
            };
            if data == "[DONE]" {
                finished = true;
                break;
            }
            let chunk: Value = serde_json::from_str(data)
                .map_err(|e| BackendError::StreamInterrupted(format!("bad event: {e}")))?;
            if let Some(choice) = chunk["choices"].get(0) {
                if let Some(delta) = choice["delta"]["content"].as_str() {
                    if !delta.is_empty() {
                        ttft.get_or_insert_with(|| start.elapsed());
                        text.push_str(delta);
                    }
                }
                if choice["finish_reason"].is_string() {
                    finished = true;
                }
            }
            if let Some(u) = chunk.get("usage").filter(|u| !u.is_null()) {
                usage = serde_json::from_value::<ServerUsage>(u.clone()).ok();
            }
        }
        let total = start.elapsed();
        if !finished {
            return Err(BackendError::StreamInterrupted(
                "stream ended before completion".into(),
            ));
        }

        let usage = match usage {
            Some(u) => usage_from_server(&u),
            None => {
                let (text_tokens, vision_tokens) =
                    estimate_prompt_usage(bundle, self.counter.as_ref(), self.cfg.pixel_budget);
                TokenUsage {
                    prompt_text_tokens: text_tokens,
                    prompt_vision_tokens: vision_tokens,
                    completion_tokens: self.counter.count(&text),
                    source: UsageSource::Estimated,
                }
            }
        };
        let timing = Timing::measured(ttft.unwrap_or(total), total, usage.completion_tokens);
        Ok(Completion {
            text,
            usage,
            timing,
        })
    }
}

impl BackendProvider for HttpBackend {
    fn backend_for(&self, _: &Episode) -> Result<Box<dyn ModelBackend + Send>, BackendError> {
        Ok(Box::new(self.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides() {
        let cfg = HttpConfig::default()
            .apply_overrides(|k| match k {
                ENV_ENDPOINT => Some("http://x/v1/chat/completions".into()),
                ENV_TIMEOUT => Some("5".into()),
                ENV_MAX_IN_FLIGHT => Some("2".into()),
                _ => None,
            })
            .unwrap();
        assert_eq!(cfg.endpoint, "http://x/v1/chat/completions");
        assert_eq!(cfg.timeout_secs, 5.0);
        assert_eq!(cfg.max_in_flight, 2);
        assert!(HttpConfig::default()
            .apply_overrides(|k| (k == ENV_TIMEOUT).then(|| "soon".into()))
            .is_err());
    }

    #[test]
    fn toml_settings() {
        let cfg: HttpConfig = toml::from_str(
            "endpoint = \"http://h/v1/chat/completions\"\nmodel = \"m\"\nmax_in_flight = 8\n",
        )
        .unwrap();
        assert_eq!(cfg.model, "m");
        assert_eq!(cfg.max_in_flight, 8);
        assert_eq!(cfg.timeout_secs, 120.0);
    }

    #[test]
    fn server_usage_split() {
        let u: ServerUsage = serde_json::from_str(
            r#"{"prompt_tokens":900,"completion_tokens":40,"prompt_tokens_details":{"image_tokens":640}}"#,
        )
        .unwrap();
        let t = usage_from_server(&u);
        assert_eq!((t.prompt_text_tokens, t.prompt_vision_tokens, t.itc()), (260, 640, 900));
    }

    #[test]
    fn in_flight_limit_blocks() {
        let sem = Arc::new(InFlight::new(1));
        let p = sem.acquire();
        let s2 = sem.clone();
        let h = std::thread::spawn(move || {
            let t = Instant::now();
            let _p = s2.acquire();
            t.elapsed()
        });
        std::thread::sleep(Duration::from_millis(50));
        drop(p);
        assert!(h.join().unwrap() >= Duration::from_millis(40));
    }
}
