//! Episode datasets: a small JSON manifest pointing at a JSON-lines file with
//! one episode per line.
//!
//! ```text
//! manifest.json   {"format":"navkit-episodes","version":1,
//!                  "records":"episodes.jsonl","image_root":"."}
//! episodes.jsonl  {"id":"ep-1","app":"Clock","instruction":"...",
//!                  "steps":[{"index":1,"screenshot":"img/ep-1_1.png",
//!                            "primary_action":{"name":"mobile_use",...},
//!                            "gold_choices":[{"type":"click","bbox":[0,0,10,10]}],
//!                            "annotated_context":"...","annotated_thought":"..."}]}
//! ```
//!
//! `records` and `image_root` are resolved against the manifest's directory.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::eval::matching::{match_action, GoldChoice};

pub const MANIFEST_FORMAT: &str = "navkit-episodes";
pub const MANIFEST_VERSION: u32 = 1;

/// Upper bound on steps for agent-collected episodes.
pub const MAX_AGENT_STEPS: usize = 30;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("episode `{episode}`{}: {message}", step.map(|s| format!(" step {s}")).unwrap_or_default())]
    Invariant {
        episode: String,
        step: Option<u32>,
        message: String,
    },
    #[error("episode `{episode}` step {step}: screenshot {path}: {message}")]
    Image {
        episode: String,
        step: u32,
        path: PathBuf,
        message: String,
    },
}

impl DatasetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.into(),
            source,
        }
    }

    fn invariant(episode: &str, step: Option<u32>, message: impl Into<String>) -> Self {
        DatasetError::Invariant {
            episode: episode.to_string(),
            step,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeSource {
    Human,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based.
    pub index: u32,
    /// Path relative to the dataset's image root.
    pub screenshot: String,
    /// The demonstrated action; what the replay backend emits.
    pub primary_action: Action,
    #[serde(default)]
    pub gold_choices: Vec<GoldChoice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotated_context: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotated_thought: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub app: String,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<EpisodeSource>,
    /// Set on fallback episodes re-executed after a truncated parent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    pub steps: Vec<StepRecord>,
}

impl Episode {
    /// Structural checks that hold for any episode, annotated or not:
    /// non-empty, contiguous 1-based indices, the agent step cap.
    pub fn validate_structure(&self) -> Result<(), DatasetError> {
        if self.steps.is_empty() {
            return Err(DatasetError::invariant(&self.id, None, "episode has no steps"));
        }
        for (i, step) in self.steps.iter().enumerate() {
            let expected = i as u32 + 1;
            if step.index != expected {
                return Err(DatasetError::invariant(
                    &self.id,
                    Some(step.index),
                    format!("step indices must be contiguous from 1; expected {expected}"),
                ));
            }
        }
        if self.source == Some(EpisodeSource::Agent) && self.steps.len() > MAX_AGENT_STEPS {
            return Err(DatasetError::invariant(
                &self.id,
                None,
                format!(
                    "agent-collected episode has {} steps (cap {MAX_AGENT_STEPS})",
                    self.steps.len()
                ),
            ));
        }
        Ok(())
    }

    /// Full evaluation-dataset invariants: structure plus non-empty, distinct
    /// gold choices that the primary action satisfies.
    pub fn validate(&self) -> Result<(), DatasetError> {
        self.validate_structure()?;
        for step in &self.steps {
            let at = Some(step.index);
            if step.gold_choices.is_empty() {
                return Err(DatasetError::invariant(&self.id, at, "no gold choices"));
            }
            for (i, c) in step.gold_choices.iter().enumerate() {
                if step.gold_choices[..i].contains(c) {
                    return Err(DatasetError::invariant(&self.id, at, "duplicate gold choice"));
                }
            }
            if !match_action(&step.primary_action, &step.gold_choices) {
                return Err(DatasetError::invariant(
                    &self.id,
                    at,
                    "primary action matches none of its own gold choices",
                ));
            }
        }
        Ok(())
    }
}

/// A resolved screenshot: absolute-ish path plus pixel dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
}

impl ImageRef {
    /// Reads only the image header.
    pub fn probe(path: impl Into<PathBuf>) -> Result<Self, image::ImageError> {
        let path = path.into();
        let (width, height) = image::image_dimensions(&path)?;
        Ok(ImageRef {
            path,
            width,
            height,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub records: String,
    #[serde(default = "default_image_root")]
    pub image_root: String,
}

fn default_image_root() -> String {
    ".".to_string()
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub image_root: PathBuf,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    /// Loads and fully validates a dataset. `path` may be a manifest or a
    /// bare `.jsonl` file (images then resolve against its directory).
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let ds = Self::load_unvalidated(path)?;
        for ep in &ds.episodes {
            ep.validate()?;
        }
        ds.check_unique_ids()?;
        Ok(ds)
    }

    /// Parses records without the gold-choice invariants; used for raw
    /// collections awaiting annotation.
    pub fn load_unvalidated(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let is_jsonl = path.extension().is_some_and(|e| e == "jsonl");
        let (records, image_root) = if is_jsonl {
            (path.to_path_buf(), base)
        } else {
            let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
            let manifest: Manifest =
                serde_json::from_str(&text).map_err(|e| DatasetError::Schema {
                    path: path.to_path_buf(),
                    line: e.line(),
                    message: e.to_string(),
                })?;
            if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
                return Err(DatasetError::Schema {
                    path: path.to_path_buf(),
                    line: 1,
                    message: format!(
                        "unsupported manifest {} v{} (expected {MANIFEST_FORMAT} v{MANIFEST_VERSION})",
                        manifest.format, manifest.version
                    ),
                });
            }
            (base.join(&manifest.records), base.join(&manifest.image_root))
        };
        let episodes = read_jsonl::<Episode>(&records)?;
        for ep in &episodes {
            ep.validate_structure()?;
        }
        Ok(Dataset {
            image_root,
            episodes,
        })
    }

    fn check_unique_ids(&self) -> Result<(), DatasetError> {
        let mut seen = std::collections::HashSet::new();
        for ep in &self.episodes {
            if !seen.insert(ep.id.as_str()) {
                return Err(DatasetError::invariant(&ep.id, None, "duplicate episode id"));
            }
        }
        Ok(())
    }

    /// Resolves and probes a step's screenshot.
    pub fn resolve_screenshot(
        &self,
        episode: &Episode,
        step: &StepRecord,
    ) -> Result<ImageRef, DatasetError> {
        resolve_screenshot(&self.image_root, episode, step)
    }
}

pub fn resolve_screenshot(
    image_root: &Path,
    episode: &Episode,
    step: &StepRecord,
) -> Result<ImageRef, DatasetError> {
    let path = image_root.join(&step.screenshot);
    ImageRef::probe(&path).map_err(|e| DatasetError::Image {
        episode: episode.id.clone(),
        step: step.index,
        path,
        message: e.to_string(),
    })
}

/// Reads a JSON-lines file, skipping blank lines; errors carry line numbers.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| DatasetError::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|e| DatasetError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| DatasetError::io(path, e))?;
    }
    w.flush().map_err(|e| DatasetError::io(path, e))
}

/// Writes `manifest.json` + `episodes.jsonl` into `dir` and returns the
/// manifest path. `image_root` is stored as given.
pub fn write_dataset(
    dir: &Path,
    episodes: &[Episode],
    image_root: &Path,
) -> Result<PathBuf, DatasetError> {
    fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
    write_jsonl(&dir.join("episodes.jsonl"), episodes)?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
        records: "episodes.jsonl".to_string(),
        image_root: image_root.to_string_lossy().into_owned(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| DatasetError::io(&path, e))?;
    Ok(path)
}
