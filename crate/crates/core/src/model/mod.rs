//! Model backends and the efficiency instrumentation shared by all of them.
//!
//! A backend turns a [`PromptBundle`] into completion text plus token usage
//! and timing. Three implementations ship: a streaming chat-completions HTTP
//! client, a replay backend that emits an episode's gold actions, and a
//! scripted backend that plays back canned completions.

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::PromptBundle;
use crate::dataset::Episode;

pub mod http;
pub mod mock;
pub mod replay;
pub mod scripted;

pub use http::{HttpBackend, HttpConfig};
pub use replay::{ReplayBackend, ReplayProvider};
pub use scripted::{ScriptedBackend, ScriptedProvider};

/// Pixel budget of the vision encoder.
pub const DEFAULT_MIN_PIXELS: u64 = 200_704;
pub const DEFAULT_MAX_PIXELS: u64 = 501_760;
/// Side of one vision token's patch grid cell, in pixels.
pub const VISION_CELL: u64 = 28;

const TPS_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("timed out or unreachable after {after:?}: {detail}")]
    Timeout { after: Duration, detail: String },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("stream interrupted: {0}")]
    StreamInterrupted(String),
    #[error("replay exhausted: episode has {steps} steps")]
    ExhaustedEpisode { steps: usize },
    #[error("script exhausted after {calls} calls")]
    ScriptExhausted { calls: usize },
    #[error("no script for episode `{0}`")]
    NoScript(String),
    #[error("cannot encode image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UsageSource {
    ServerReported,
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_text_tokens: u64,
    pub prompt_vision_tokens: u64,
    pub completion_tokens: u64,
    pub source: UsageSource,
}

impl TokenUsage {
    /// Input token count: text plus vision.
    pub fn itc(&self) -> u64 {
        self.prompt_text_tokens + self.prompt_vision_tokens
    }
}

/// Wall-clock measurements of one call, in seconds on a monotonic clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub ttft: f64,
    pub total: f64,
    pub tps: f64,
}

impl Timing {
    pub fn measured(ttft: Duration, total: Duration, completion_tokens: u64) -> Self {
        let total = total.as_secs_f64();
        let ttft = ttft.as_secs_f64().min(total);
        let tps = completion_tokens as f64 / (total - ttft).max(TPS_EPSILON);
        Timing { ttft, total, tps }
    }

    /// For backends that do no inference.
    pub fn zero() -> Self {
        Timing {
            ttft: 0.0,
            total: 0.0,
            tps: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: TokenUsage,
    pub timing: Timing,
}

pub trait ModelBackend {
    fn complete(&mut self, bundle: &PromptBundle) -> Result<Completion, BackendError>;
}

impl<B: ModelBackend + ?Sized> ModelBackend for Box<B> {
    fn complete(&mut self, bundle: &PromptBundle) -> Result<Completion, BackendError> {
        (**self).complete(bundle)
    }
}

/// Hands out one backend per episode. Replay and scripted backends are
/// episode-scoped; the HTTP backend hands out clones sharing one client.
pub trait BackendProvider: Sync {
    fn backend_for(&self, episode: &Episode)
        -> Result<Box<dyn ModelBackend + Send>, BackendError>;
}

/// Counts text tokens. The default is a tokenizer-free byte heuristic.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> u64;
}

/// `ceil(bytes / 4)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteHeuristic;

impl TokenCounter for ByteHeuristic {
    fn count(&self, text: &str) -> u64 {
        estimate_text_tokens(text)
    }
}

pub fn estimate_text_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBudget {
    pub min_pixels: u64,
    pub max_pixels: u64,
}

impl Default for PixelBudget {
    fn default() -> Self {
        PixelBudget {
            min_pixels: DEFAULT_MIN_PIXELS,
            max_pixels: DEFAULT_MAX_PIXELS,
        }
    }
}

/// Vision tokens for one image after a virtual resize into the pixel budget.
///
/// Both sides are snapped to multiples of 28 with the aspect ratio kept as
/// far as the grid allows; the result is `(W'/28)·(H'/28)` and always lies in
/// `[ceil(min/784), floor(max/784)]`.
pub fn estimate_vision_tokens(width: u32, height: u32, min_pixels: u64, max_pixels: u64) -> u64 {
    let cell_area = (VISION_CELL * VISION_CELL) as f64;
    let cell = VISION_CELL as f64;
    let min_cells = (min_pixels as f64 / cell_area).ceil().max(1.0) as u64;
    let max_cells = ((max_pixels as f64 / cell_area).floor() as u64).max(min_cells);
    let (w, h) = (f64::from(width.max(1)), f64::from(height.max(1)));

    let mut wc = ((w / cell).round() as u64).max(1);
    let mut hc = ((h / cell).round() as u64).max(1);
    if wc * hc > max_cells {
        let beta = (w * h / max_pixels as f64).sqrt();
        wc = ((w / beta / cell).floor() as u64).max(1);
        hc = ((h / beta / cell).floor() as u64).max(1);
    } else if wc * hc < min_cells {
        let beta = (min_pixels as f64 / (w * h)).sqrt();
        wc = ((w * beta / cell).ceil() as u64).max(1);
        hc = ((h * beta / cell).ceil() as u64).max(1);
    }
    // extreme aspect ratios can still land outside the budget; trim or grow
    // the long side
    if wc * hc > max_cells {
        if wc >= hc {
            wc = (max_cells / hc).max(1);
        } else {
            hc = (max_cells / wc).max(1);
        }
    }
    if wc * hc < min_cells {
        if wc >= hc {
            wc = min_cells.div_ceil(hc);
        } else {
            hc = min_cells.div_ceil(wc);
        }
    }
    wc * hc
}

/// Prompt usage for a bundle, without asking any server.
pub fn estimate_prompt_usage(
    bundle: &PromptBundle,
    counter: &dyn TokenCounter,
    budget: PixelBudget,
) -> (u64, u64) {
    let text = counter.count(&bundle.system_text) + counter.count(&bundle.user_text);
    let vision = bundle
        .images
        .iter()
        .map(|img| estimate_vision_tokens(img.width, img.height, budget.min_pixels, budget.max_pixels))
        .sum();
    (text, vision)
}

/// Estimated usage for an offline backend that "answers" with `text`.
pub(crate) fn estimated_usage(bundle: &PromptBundle, text: &str) -> TokenUsage {
    let (prompt_text_tokens, prompt_vision_tokens) =
        estimate_prompt_usage(bundle, &ByteHeuristic, PixelBudget::default());
    TokenUsage {
        prompt_text_tokens,
        prompt_vision_tokens,
        completion_tokens: estimate_text_tokens(text),
        source: UsageSource::Estimated,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn est(w: u32, h: u32) -> u64 {
        estimate_vision_tokens(w, h, DEFAULT_MIN_PIXELS, DEFAULT_MAX_PIXELS)
    }

    #[test]
    fn floor_budget_image() {
        // 448*448 = 200,704 = 256 cells of 28x28
        assert_eq!(est(448, 448), 256);
    }

    #[test]
    fn ceiling_budget_image() {
        // 896*560 = 501,760 = 640 cells; twice that size scales back down
        assert_eq!(est(896, 560), 640);
        assert_eq!(est(1792, 1120), 640);
    }

    #[test]
    fn tiny_image_scaled_up() {
        assert_eq!(est(28, 28), 256);
        assert!(est(1, 1) >= 256);
    }

    #[test]
    fn typical_phone_screenshot_is_within_budget() {
        let t = est(1080, 2400);
        assert!((256..=640).contains(&t), "{t}");
    }

    #[test]
    fn text_estimate() {
        assert_eq!(estimate_text_tokens(""), 0);
        assert_eq!(estimate_text_tokens("abcd"), 1);
        assert_eq!(estimate_text_tokens("abcde"), 2);
    }

    #[test]
    fn timing_tps() {
        let t = Timing::measured(Duration::from_millis(50), Duration::from_millis(150), 10);
        assert!((t.tps - 100.0).abs() < 1e-6);
        let degenerate = Timing::measured(Duration::from_millis(5), Duration::from_millis(5), 0);
        assert_eq!(degenerate.tps, 0.0);
    }

    proptest! {
        #[test]
        fn vision_estimate_bounds(w in 1u32..30_000, h in 1u32..30_000) {
            let t = est(w, h);
            prop_assert!((256..=640).contains(&t), "{}x{} -> {}", w, h, t);
        }

        #[test]
        fn text_estimate_superadditive(a in ".{0,64}", b in ".{0,64}") {
            let joined = format!("{a}{b}");
            prop_assert!(
                estimate_text_tokens(&joined)
                    <= estimate_text_tokens(&a) + estimate_text_tokens(&b) + 1
            );
        }
    }
}
