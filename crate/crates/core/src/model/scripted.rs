//! Scripted backend: plays back canned completions, one per call.
//!
//! Script files are JSON lines, one episode per line:
//!
//! ```text
//! {"episode":"ep-1","outputs":["<completion 1>","<completion 2>"]}
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use crate::agent::PromptBundle;
use crate::dataset::{read_jsonl, DatasetError, Episode};

use super::{estimated_usage, BackendError, BackendProvider, Completion, ModelBackend, Timing};

#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    outputs: Vec<String>,
    next: usize,
}

impl ScriptedBackend {
    pub fn new<I, S>(outputs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedBackend {
            outputs: outputs.into_iter().map(Into::into).collect(),
            next: 0,
        }
    }
}

impl ModelBackend for ScriptedBackend {
    fn complete(&mut self, bundle: &PromptBundle) -> Result<Completion, BackendError> {
        let text = self
            .outputs
            .get(self.next)
            .cloned()
            .ok_or(BackendError::ScriptExhausted { calls: self.next })?;
        self.next += 1;
        Ok(Completion {
            usage: estimated_usage(bundle, &text),
            text,
            timing: Timing::zero(),
        })
    }
}

#[derive(Debug, Deserialize)]
struct ScriptRecord {
    episode: String,
    outputs: Vec<String>,
}

/// Scripts keyed by episode id.
#[derive(Debug, Clone, Default)]
pub struct ScriptedProvider {
    scripts: HashMap<String, Vec<String>>,
}

impl ScriptedProvider {
    pub fn new(scripts: HashMap<String, Vec<String>>) -> Self {
        ScriptedProvider { scripts }
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let records: Vec<ScriptRecord> = read_jsonl(path)?;
        Ok(ScriptedProvider {
            scripts: records.into_iter().map(|r| (r.episode, r.outputs)).collect(),
        })
    }

    pub fn insert(&mut self, episode: impl Into<String>, outputs: Vec<String>) {
        self.scripts.insert(episode.into(), outputs);
    }
}

impl BackendProvider for ScriptedProvider {
    fn backend_for(
        &self,
        episode: &Episode,
    ) -> Result<Box<dyn ModelBackend + Send>, BackendError> {
        let outputs = self
            .scripts
            .get(&episode.id)
            .ok_or_else(|| BackendError::NoScript(episode.id.clone()))?;
        Ok(Box::new(ScriptedBackend::new(outputs.iter().cloned())))
    }
}
