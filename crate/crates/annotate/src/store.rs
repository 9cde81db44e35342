//! Append-only event log and the annotation state folded from it.
//!
//! Every write is validated against the current state, appended to
//! `events.jsonl` and fsynced before the in-memory state changes. On open
//! the log is replayed from the start; a torn final line (crash mid-write)
//! is cut off, anything else unreadable is an error.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use navkit_core::action::{Action, BBox};
use navkit_core::dataset::{write_dataset, Dataset, DatasetError, Episode, StepRecord};
use navkit_core::eval::GoldChoice;
use navkit_core::pipeline::{truncate_after_first_error, Correction, StepFlag};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LOG_FILE: &str = "events.jsonl";
pub const BATCH_FILE: &str = "batch.json";
pub const DEFAULT_LEASE_TTL: Duration = Duration::from_secs(15 * 60);

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("event log line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("batch mismatch: data dir was created for {recorded}, not {given}")]
    BatchMismatch { recorded: PathBuf, given: PathBuf },
    #[error("unknown episode `{0}`")]
    UnknownEpisode(String),
    #[error("episode `{episode}` has no step {step}")]
    UnknownStep { episode: String, step: u32 },
    #[error("step {got} submitted but step {expected} is next")]
    OutOfOrder { expected: u32, got: u32 },
    #[error("episode was truncated at step {at}")]
    AlreadyTruncated { at: u32 },
    #[error("episode is already complete")]
    AlreadyComplete,
    #[error("step {step}: a click needs a bounding box")]
    MissingBBox { step: u32 },
    #[error("step {step}: the bounding box does not contain the click")]
    BBoxExcludesClick { step: u32 },
    #[error("step {step}: an incorrect verdict needs a corrected action")]
    MissingCorrection { step: u32 },
    #[error("step {step}: a correct verdict cannot carry a correction")]
    UnexpectedCorrection { step: u32 },
    #[error("step {step}: choice already present")]
    DuplicateChoice { step: u32 },
    #[error("step {step} has not been verified")]
    StepNotVerified { step: u32 },
    #[error("episode is leased to `{holder}` until {expires_at_ms}")]
    LeaseConflict { holder: String, expires_at_ms: u64 },
    #[error("`{annotator}` does not hold the lease on this episode")]
    LeaseRequired { annotator: String },
    #[error("step {step}: a review must come from a different annotator")]
    SameAnnotator { step: u32 },
    #[error("step {step} already reviewed")]
    AlreadyReviewed { step: u32 },
    #[error("step {step} is not flagged")]
    NotFlagged { step: u32 },
    #[error("no episodes match the export selection")]
    NothingToExport,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl AnnotateError {
    /// Stable machine-readable code used by the HTTP API.
    pub fn code(&self) -> &'static str {
        match self {
            AnnotateError::Io { .. } => "io",
            AnnotateError::Corrupt { .. } => "corrupt_log",
            AnnotateError::Dataset(_) => "dataset",
            AnnotateError::BatchMismatch { .. } => "batch_mismatch",
            AnnotateError::UnknownEpisode(_) => "unknown_episode",
            AnnotateError::UnknownStep { .. } => "unknown_step",
            AnnotateError::OutOfOrder { .. } => "out_of_order",
            AnnotateError::AlreadyTruncated { .. } => "already_truncated",
            AnnotateError::AlreadyComplete => "already_complete",
            AnnotateError::MissingBBox { .. } => "missing_bbox",
            AnnotateError::BBoxExcludesClick { .. } => "bbox_excludes_click",
            AnnotateError::MissingCorrection { .. } => "missing_correction",
            AnnotateError::UnexpectedCorrection { .. } => "unexpected_correction",
            AnnotateError::DuplicateChoice { .. } => "duplicate_choice",
            AnnotateError::StepNotVerified { .. } => "step_not_verified",
            AnnotateError::LeaseConflict { .. } => "lease_conflict",
            AnnotateError::LeaseRequired { .. } => "lease_required",
            AnnotateError::SameAnnotator { .. } => "same_annotator",
            AnnotateError::AlreadyReviewed { .. } => "already_reviewed",
            AnnotateError::NotFlagged { .. } => "not_flagged",
            AnnotateError::NothingToExport => "nothing_to_export",
            AnnotateError::InvalidRequest(_) => "invalid_request",
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        AnnotateError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Judgment {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    InProgress,
    Complete,
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub step: u32,
    pub judgment: Judgment,
    #[serde(default)]
    pub bbox: Option<BBox>,
    #[serde(default)]
    pub corrected_action: Option<Action>,
    #[serde(default)]
    pub alternatives: Vec<GoldChoice>,
    pub annotator: String,
    #[serde(default)]
    pub timestamp_ms: u64,
}

/// Second-pass judgment of an already verified step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Review {
    pub step: u32,
    pub judgment: Judgment,
    #[serde(default)]
    pub corrected_action: Option<Action>,
    pub annotator: String,
    #[serde(default)]
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lease {
    pub annotator: String,
    pub expires_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    LeaseClaimed {
        episode: String,
        annotator: String,
        expires_at_ms: u64,
    },
    LeaseReleased {
        episode: String,
        annotator: String,
    },
    VerdictSubmitted {
        episode: String,
        verdict: Verdict,
    },
    AlternativeAdded {
        episode: String,
        step: u32,
        choice: GoldChoice,
        annotator: String,
    },
    ReviewSubmitted {
        episode: String,
        review: Review,
    },
    FlagResolved {
        episode: String,
        step: u32,
        annotator: String,
    },
}

impl Event {
    pub fn episode(&self) -> &str {
        match self {
            Event::LeaseClaimed { episode, .. }
            | Event::LeaseReleased { episode, .. }
            | Event::VerdictSubmitted { episode, .. }
            | Event::AlternativeAdded { episode, .. }
            | Event::ReviewSubmitted { episode, .. }
            | Event::FlagResolved { episode, .. } => episode,
        }
    }
}

/// One line of the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub at_ms: u64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeState {
    pub episode_id: String,
    pub steps: u32,
    /// Next step awaiting a verdict; verdicts exist exactly for steps below it.
    pub cursor: u32,
    pub truncated_at: Option<u32>,
    pub status: Status,
    pub verdicts: Vec<Verdict>,
    pub alternatives: BTreeMap<u32, Vec<GoldChoice>>,
    pub reviews: BTreeMap<u32, Review>,
    pub flagged: BTreeSet<u32>,
    pub lease: Option<Lease>,
}

impl EpisodeState {
    fn new(episode: &Episode) -> Self {
        EpisodeState {
            episode_id: episode.id.clone(),
            steps: episode.steps.len() as u32,
            cursor: 1,
            truncated_at: None,
            status: Status::InProgress,
            verdicts: Vec::new(),
            alternatives: BTreeMap::new(),
            reviews: BTreeMap::new(),
            flagged: BTreeSet::new(),
            lease: None,
        }
    }

    pub fn verdict(&self, step: u32) -> Option<&Verdict> {
        self.verdicts.get(step.checked_sub(1)? as usize)
    }

    fn apply(&mut self, event: &Event) {
        match event {
            Event::LeaseClaimed {
                annotator,
                expires_at_ms,
                ..
            } => {
                self.lease = Some(Lease {
                    annotator: annotator.clone(),
                    expires_at_ms: *expires_at_ms,
                })
            }
            Event::LeaseReleased { .. } => self.lease = None,
            Event::VerdictSubmitted { verdict, .. } => {
                let step = verdict.step;
                self.verdicts.push(verdict.clone());
                if !verdict.alternatives.is_empty() {
                    self.alternatives
                        .entry(step)
                        .or_default()
                        .extend(verdict.alternatives.iter().cloned());
                }
                self.cursor = step + 1;
                match verdict.judgment {
                    Judgment::Incorrect => {
                        self.truncated_at = Some(step);
                        self.status = Status::Truncated;
                    }
                    Judgment::Correct if step == self.steps => self.status = Status::Complete,
                    Judgment::Correct => {}
                }
            }
            Event::AlternativeAdded { step, choice, .. } => {
                self.alternatives.entry(*step).or_default().push(choice.clone());
            }
            Event::ReviewSubmitted { review, .. } => {
                let first = &self.verdicts[review.step as usize - 1];
                if disagrees(first, review) {
                    self.flagged.insert(review.step);
                }
                self.reviews.insert(review.step, review.clone());
            }
            Event::FlagResolved { step, .. } => {
                self.flagged.remove(step);
            }
        }
    }
}

fn disagrees(first: &Verdict, review: &Review) -> bool {
    first.judgment != review.judgment
        || (first.judgment == Judgment::Incorrect && first.corrected_action != review.corrected_action)
}

/// Gold choices of a verified step: the verified (or corrected) action's own
/// choice followed by any alternatives.
pub fn verified_choices(step: &StepRecord, state: &EpisodeState) -> Option<Vec<GoldChoice>> {
    let v = state.verdict(step.index)?;
    let action = v.corrected_action.as_ref().unwrap_or(&step.primary_action);
    let mut out = vec![GoldChoice::for_action(action, v.bbox)];
    if let Some(alts) = state.alternatives.get(&step.index) {
        out.extend(alts.iter().cloned());
    }
    Some(out)
}

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BatchRecord {
    dataset: PathBuf,
}

struct Inner {
    log: File,
    log_len: u64,
    next_seq: u64,
    states: BTreeMap<String, EpisodeState>,
}

pub struct Store {
    data_dir: PathBuf,
    log_path: PathBuf,
    source: Dataset,
    index: HashMap<String, usize>,
    lease_ttl_ms: u64,
    clock: Clock,
    inner: Mutex<Inner>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub manifest: PathBuf,
    pub episodes: Vec<(String, usize)>,
    pub skipped_flagged: Vec<String>,
}

/// An item of the blind review queue. The first-pass verdict is withheld.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub episode: String,
    pub step: u32,
    pub proposed_action: Action,
}

impl Store {
    /// Opens (or creates) the data dir for one batch. `dataset` may be
    /// omitted on reopen; the batch records which dataset it was made for.
    pub fn open(data_dir: &Path, dataset: Option<&Path>, lease_ttl: Duration) -> Result<Self, AnnotateError> {
        Self::open_with_clock(data_dir, dataset, lease_ttl, system_clock())
    }

    pub fn open_with_clock(
        data_dir: &Path,
        dataset: Option<&Path>,
        lease_ttl: Duration,
        clock: Clock,
    ) -> Result<Self, AnnotateError> {
        fs::create_dir_all(data_dir).map_err(|e| AnnotateError::io(data_dir, e))?;
        let batch_path = data_dir.join(BATCH_FILE);
        let recorded: Option<BatchRecord> = match fs::read_to_string(&batch_path) {
            Ok(text) => Some(serde_json::from_str(&text).map_err(|e| AnnotateError::Corrupt {
                line: e.line(),
                message: format!("{}: {e}", batch_path.display()),
            })?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(AnnotateError::io(&batch_path, e)),
        };
        let dataset_path = match (dataset, &recorded) {
            (Some(given), Some(rec)) => {
                let given_abs = absolute(given)?;
                if given_abs != rec.dataset {
                    return Err(AnnotateError::BatchMismatch {
                        recorded: rec.dataset.clone(),
                        given: given_abs,
                    });
                }
                given_abs
            }
            (Some(given), None) => {
                let given_abs = absolute(given)?;
                let text = serde_json::to_string_pretty(&BatchRecord {
                    dataset: given_abs.clone(),
                })
                .expect("batch record serializes");
                fs::write(&batch_path, text + "\n").map_err(|e| AnnotateError::io(&batch_path, e))?;
                given_abs
            }
            (None, Some(rec)) => rec.dataset.clone(),
            (None, None) => {
                return Err(AnnotateError::InvalidRequest(
                    "new data dir: a dataset to annotate is required".into(),
                ))
            }
        };

        let mut source = Dataset::load_unvalidated(&dataset_path)?;
        source.image_root = absolute(&source.image_root)?;
        let index = source
            .episodes
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.clone(), i))
            .collect::<HashMap<_, _>>();
        if index.len() != source.episodes.len() {
            return Err(AnnotateError::InvalidRequest("duplicate episode ids in batch".into()));
        }

        let log_path = data_dir.join(LOG_FILE);
        let (entries, good_len) = read_log(&log_path)?;
        let mut states: BTreeMap<String, EpisodeState> = source
            .episodes
            .iter()
            .map(|e| (e.id.clone(), EpisodeState::new(e)))
            .collect();
        for (line, entry) in entries.iter().enumerate() {
            if entry.seq != line as u64 + 1 {
                return Err(AnnotateError::Corrupt {
                    line: line + 1,
                    message: format!("expected seq {}, found {}", line + 1, entry.seq),
                });
            }
            let state = states
                .get_mut(entry.event.episode())
                .ok_or_else(|| AnnotateError::Corrupt {
                    line: line + 1,
                    message: format!("unknown episode `{}`", entry.event.episode()),
                })?;
            state.apply(&entry.event);
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| AnnotateError::io(&log_path, e))?;
        // drop a torn tail left by a crash mid-append
        if log.metadata().map_err(|e| AnnotateError::io(&log_path, e))?.len() != good_len {
            log.set_len(good_len).map_err(|e| AnnotateError::io(&log_path, e))?;
            log.sync_all().map_err(|e| AnnotateError::io(&log_path, e))?;
        }
        Ok(Store {
            data_dir: data_dir.to_path_buf(),
            log_path,
            source,
            index,
            lease_ttl_ms: lease_ttl.as_millis() as u64,
            clock,
            inner: Mutex::new(Inner {
                log,
                log_len: good_len,
                next_seq: entries.len() as u64 + 1,
                states,
            }),
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn image_root(&self) -> &Path {
        &self.source.image_root
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.source.episodes
    }

    pub fn episode(&self, id: &str) -> Result<&Episode, AnnotateError> {
        self.index
            .get(id)
            .map(|&i| &self.source.episodes[i])
            .ok_or_else(|| AnnotateError::UnknownEpisode(id.to_string()))
    }

    pub fn step(&self, id: &str, step: u32) -> Result<&StepRecord, AnnotateError> {
        let ep = self.episode(id)?;
        step.checked_sub(1)
            .and_then(|i| ep.steps.get(i as usize))
            .ok_or_else(|| AnnotateError::UnknownStep {
                episode: id.to_string(),
                step,
            })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn state(&self, id: &str) -> Result<EpisodeState, AnnotateError> {
        self.episode(id)?;
        Ok(self.lock().states[id].clone())
    }

    /// Consistent copy of every episode's state.
    pub fn snapshot(&self) -> BTreeMap<String, EpisodeState> {
        self.lock().states.clone()
    }

    fn append(&self, inner: &mut Inner, event: Event) -> Result<(), AnnotateError> {
        let entry = LogEntry {
            seq: inner.next_seq,
            at_ms: (self.clock)(),
            event,
        };
        let mut line = serde_json::to_vec(&entry).expect("log entry serializes");
        line.push(b'\n');
        let written = inner
            .log
            .write_all(&line)
            .and_then(|_| inner.log.sync_data());
        if let Err(e) = written {
            let _ = inner.log.set_len(inner.log_len);
            return Err(AnnotateError::io(&self.log_path, e));
        }
        inner.log_len += line.len() as u64;
        inner.next_seq += 1;
        let state = inner
            .states
            .get_mut(entry.event.episode())
            .expect("validated episode");
        state.apply(&entry.event);
        Ok(())
    }

    fn check_lease(&self, state: &EpisodeState, annotator: &str) -> Result<(), AnnotateError> {
        match &state.lease {
            Some(l) if l.annotator == annotator && l.expires_at_ms > (self.clock)() => Ok(()),
            _ => Err(AnnotateError::LeaseRequired {
                annotator: annotator.to_string(),
            }),
        }
    }

    /// Claims or renews the single-writer lease on an episode.
    pub fn claim(&self, id: &str, annotator: &str) -> Result<Lease, AnnotateError> {
        self.episode(id)?;
        non_empty(annotator)?;
        let mut inner = self.lock();
        let now = (self.clock)();
        if let Some(l) = &inner.states[id].lease {
            if l.annotator != annotator && l.expires_at_ms > now {
                return Err(AnnotateError::LeaseConflict {
                    holder: l.annotator.clone(),
                    expires_at_ms: l.expires_at_ms,
                });
            }
        }
        let expires_at_ms = now + self.lease_ttl_ms;
        self.append(
            &mut inner,
            Event::LeaseClaimed {
                episode: id.to_string(),
                annotator: annotator.to_string(),
                expires_at_ms,
            },
        )?;
        Ok(Lease {
            annotator: annotator.to_string(),
            expires_at_ms,
        })
    }

    pub fn release(&self, id: &str, annotator: &str) -> Result<(), AnnotateError> {
        self.episode(id)?;
        let mut inner = self.lock();
        self.check_lease(&inner.states[id], annotator)?;
        self.append(
            &mut inner,
            Event::LeaseReleased {
                episode: id.to_string(),
                annotator: annotator.to_string(),
            },
        )
    }

    pub fn submit_verdict(&self, id: &str, mut verdict: Verdict) -> Result<EpisodeState, AnnotateError> {
        let episode = self.episode(id)?;
        non_empty(&verdict.annotator)?;
        let mut inner = self.lock();
        let state = &inner.states[id];
        self.check_lease(state, &verdict.annotator)?;
        match state.status {
            Status::Truncated => {
                return Err(AnnotateError::AlreadyTruncated {
                    at: state.truncated_at.unwrap_or(0),
                })
            }
            Status::Complete => return Err(AnnotateError::AlreadyComplete),
            Status::InProgress => {}
        }
        if verdict.step != state.cursor {
            return Err(AnnotateError::OutOfOrder {
                expected: state.cursor,
                got: verdict.step,
            });
        }
        let step = &episode.steps[verdict.step as usize - 1];
        let n = verdict.step;
        let action = match (verdict.judgment, &verdict.corrected_action) {
            (Judgment::Correct, None) => &step.primary_action,
            (Judgment::Correct, Some(_)) => return Err(AnnotateError::UnexpectedCorrection { step: n }),
            (Judgment::Incorrect, Some(a)) => a,
            (Judgment::Incorrect, None) => return Err(AnnotateError::MissingCorrection { step: n }),
        };
        if let Action::Click { coordinate } = action {
            match verdict.bbox {
                None => return Err(AnnotateError::MissingBBox { step: n }),
                Some(b) if !b.contains(*coordinate) => {
                    return Err(AnnotateError::BBoxExcludesClick { step: n })
                }
                Some(_) => {}
            }
        }
        let own = GoldChoice::for_action(action, verdict.bbox);
        let mut seen = vec![own];
        for alt in &verdict.alternatives {
            if seen.contains(alt) {
                return Err(AnnotateError::DuplicateChoice { step: n });
            }
            seen.push(alt.clone());
        }
        verdict.timestamp_ms = (self.clock)();
        self.append(
            &mut inner,
            Event::VerdictSubmitted {
                episode: id.to_string(),
                verdict,
            },
        )?;
        Ok(inner.states[id].clone())
    }

    /// Adds an alternative gold choice to a verified step; returns the
    /// step's full choice list.
    pub fn add_alternative(
        &self,
        id: &str,
        step: u32,
        choice: GoldChoice,
        annotator: &str,
    ) -> Result<Vec<GoldChoice>, AnnotateError> {
        let record = self.step(id, step)?;
        let mut inner = self.lock();
        let state = &inner.states[id];
        self.check_lease(state, annotator)?;
        let current = verified_choices(record, state).ok_or(AnnotateError::StepNotVerified { step })?;
        if current.contains(&choice) {
            return Err(AnnotateError::DuplicateChoice { step });
        }
        self.append(
            &mut inner,
            Event::AlternativeAdded {
                episode: id.to_string(),
                step,
                choice,
                annotator: annotator.to_string(),
            },
        )?;
        Ok(verified_choices(record, &inner.states[id]).expect("still verified"))
    }

    /// Second-pass check; a disagreement with the first verdict flags the
    /// step for adjudication.
    pub fn submit_review(&self, id: &str, mut review: Review) -> Result<EpisodeState, AnnotateError> {
        self.step(id, review.step)?;
        non_empty(&review.annotator)?;
        let mut inner = self.lock();
        let state = &inner.states[id];
        self.check_lease(state, &review.annotator)?;
        let first = state
            .verdict(review.step)
            .ok_or(AnnotateError::StepNotVerified { step: review.step })?;
        if first.annotator == review.annotator {
            return Err(AnnotateError::SameAnnotator { step: review.step });
        }
        if state.reviews.contains_key(&review.step) {
            return Err(AnnotateError::AlreadyReviewed { step: review.step });
        }
        if review.judgment == Judgment::Incorrect && review.corrected_action.is_none() {
            return Err(AnnotateError::MissingCorrection { step: review.step });
        }
        review.timestamp_ms = (self.clock)();
        self.append(
            &mut inner,
            Event::ReviewSubmitted {
                episode: id.to_string(),
                review,
            },
        )?;
        Ok(inner.states[id].clone())
    }

    pub fn resolve_flag(&self, id: &str, step: u32, annotator: &str) -> Result<EpisodeState, AnnotateError> {
        self.step(id, step)?;
        let mut inner = self.lock();
        let state = &inner.states[id];
        self.check_lease(state, annotator)?;
        if !state.flagged.contains(&step) {
            return Err(AnnotateError::NotFlagged { step });
        }
        self.append(
            &mut inner,
            Event::FlagResolved {
                episode: id.to_string(),
                step,
                annotator: annotator.to_string(),
            },
        )?;
        Ok(inner.states[id].clone())
    }

    /// Verified, unreviewed steps the given annotator did not verify.
    pub fn review_queue(&self, annotator: &str) -> Vec<ReviewItem> {
        let inner = self.lock();
        let mut out = Vec::new();
        for ep in &self.source.episodes {
            let state = &inner.states[&ep.id];
            for v in &state.verdicts {
                if v.annotator != annotator && !state.reviews.contains_key(&v.step) {
                    out.push(ReviewItem {
                        episode: ep.id.clone(),
                        step: v.step,
                        proposed_action: ep.steps[v.step as usize - 1].primary_action.clone(),
                    });
                }
            }
        }
        out
    }

    /// The annotated form of one finished episode, or `None` if it is
    /// still in progress.
    pub fn annotated_episode(&self, episode: &Episode, state: &EpisodeState) -> Result<Option<Episode>, AnnotateError> {
        if state.status == Status::InProgress {
            return Ok(None);
        }
        let mut out = episode.clone();
        let mut flags = Vec::with_capacity(out.steps.len());
        for step in &mut out.steps {
            match state.verdict(step.index) {
                Some(v) if v.judgment == Judgment::Correct => {
                    step.gold_choices = verified_choices(step, state).expect("verified");
                    flags.push(StepFlag::ok());
                }
                Some(v) => flags.push(StepFlag::wrong(Some(Correction {
                    action: v.corrected_action.clone().expect("validated"),
                    bbox: v.bbox,
                }))),
                None => flags.push(StepFlag::ok()),
            }
        }
        let mut out = truncate_after_first_error(&out, &flags)
            .map_err(|e| AnnotateError::InvalidRequest(e.to_string()))?;
        if let Some(at) = state.truncated_at {
            if let Some(alts) = state.alternatives.get(&at) {
                out.steps[at as usize - 1].gold_choices.extend(alts.iter().cloned());
            }
        }
        out.validate()?;
        Ok(Some(out))
    }

    /// Writes finished episodes with the selected statuses as a loadable
    /// dataset. Episodes with unresolved review flags are left out.
    pub fn export(&self, statuses: &[Status], out_dir: &Path) -> Result<ExportSummary, AnnotateError> {
        let snapshot = self.snapshot();
        let mut episodes = Vec::new();
        let mut skipped_flagged = Vec::new();
        for ep in &self.source.episodes {
            let state = &snapshot[&ep.id];
            if !statuses.contains(&state.status) {
                continue;
            }
            if !state.flagged.is_empty() {
                skipped_flagged.push(ep.id.clone());
                continue;
            }
            if let Some(annotated) = self.annotated_episode(ep, state)? {
                episodes.push(annotated);
            }
        }
        if episodes.is_empty() {
            return Err(AnnotateError::NothingToExport);
        }
        let manifest = write_dataset(out_dir, &episodes, &self.source.image_root)?;
        Ok(ExportSummary {
            manifest,
            episodes: episodes.iter().map(|e| (e.id.clone(), e.steps.len())).collect(),
            skipped_flagged,
        })
    }
}

fn non_empty(annotator: &str) -> Result<(), AnnotateError> {
    if annotator.trim().is_empty() {
        Err(AnnotateError::InvalidRequest("annotator id must be non-empty".into()))
    } else {
        Ok(())
    }
}

fn absolute(p: &Path) -> Result<PathBuf, AnnotateError> {
    std::path::absolute(p).map_err(|e| AnnotateError::io(p, e))
}

/// Parses the log. Returns the entries and the byte length of the intact
/// prefix; only the final line may be torn.
pub fn read_log(path: &Path) -> Result<(Vec<LogEntry>, u64), AnnotateError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(AnnotateError::io(path, e)),
    };
    let mut entries = Vec::new();
    let mut offset = 0usize;
    let mut line_no = 0usize;
    while offset < bytes.len() {
        line_no += 1;
        let end = bytes[offset..].iter().position(|&b| b == b'\n');
        let Some(end) = end else {
            // no newline: the write never finished
            break;
        };
        let line = &bytes[offset..offset + end];
        let is_last = offset + end + 1 == bytes.len();
        match serde_json::from_slice::<LogEntry>(line) {
            Ok(entry) => entries.push(entry),
            Err(_) if is_last => break,
            Err(e) => {
                return Err(AnnotateError::Corrupt {
                    line: line_no,
                    message: e.to_string(),
                })
            }
        }
        offset += end + 1;
    }
    Ok((entries, offset as u64))
}
