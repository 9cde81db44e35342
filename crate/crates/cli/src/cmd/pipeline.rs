use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use navkit_core::dataset::{read_jsonl, write_dataset, write_jsonl, Dataset, Episode};
use navkit_core::pipeline::{
    dedup_instructions, filter_elements, gr2nav, qc_instruction, truncate_after_first_error,
    DropCounts, ElementAttributes, GroundingSample, PipelineError, PipelineManifest,
    StepFlag, UiElement, DEFAULT_MIN_DISTANCE,
};
use navkit_core::action::BBox;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{absolute, create_dir, write_json};
use crate::config::FileConfig;
use crate::error::CliError;

pub const PIPELINE_MANIFEST: &str = "pipeline_manifest.json";

/// Data pipeline stages. Each writes its outputs plus pipeline_manifest.json
/// (config, seed, input/output counts, drop counts) into --out.
#[derive(Debug, Subcommand)]
pub enum PipelineCommand {
    FilterGrounding(FilterArgs),
    Gr2nav(Gr2navArgs),
    Truncate(TruncateArgs),
    Dedup(DedupArgs),
}

const FILTER_ABOUT: &str = "\
Keeps grounding candidates from captured pages.

Input: JSONL, one page per line:
  {\"id\": STR, \"app\": STR?, \"screenshot\": PATH, \"screen\": [W, H]?, \"root\": ELEMENT}
  ELEMENT = {\"bbox\": [X0, Y0, X1, Y1], \"attributes\": {\"resource_id\"?, \"text\"?,
             \"class\"?, \"clickable\"?}, \"children\": [ELEMENT, ...]}
Screenshots resolve against --image-root (default: the input's directory);
screen defaults to the screenshot's size.

Output: candidates.jsonl, one kept leaf per line:
  {\"page\": STR, \"app\": STR?, \"screenshot\": PATH, \"bbox\": [...], \"attributes\": {...}}
The manifest counts elements dropped per rule (not_leaf, small_area,
extreme_aspect, large_area, uniform_color, seen_before). Pages are processed
in file order with one seen-set and one RNG seeded from --seed.";

/// Filter page hierarchies down to grounding candidates.
#[derive(Debug, Args)]
#[command(long_about = FILTER_ABOUT)]
pub struct FilterArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the filter table's rng_seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub min_area: Option<f64>,
    #[arg(long)]
    pub max_aspect: Option<f64>,
    #[arg(long)]
    pub max_screen_frac: Option<f64>,
    #[arg(long)]
    pub uniform_color_var: Option<f64>,
    #[arg(long)]
    pub seen_keep_prob: Option<f64>,
}

const GR2NAV_ABOUT: &str = "\
Turns grounding samples into single-step click episodes.

Input: JSONL, one sample per line:
  {\"id\": STR?, \"app\": STR?, \"instruction\": STR, \"rationale\": STR,
   \"screenshot\": PATH, \"target\": [X0, Y0, X1, Y1]}
Each sample becomes an episode clicking the floored centre of its target,
with the target as the only gold choice. A sample without an id becomes
episode gr<n>, n being its 1-based position in the input.

Output: a dataset (manifest.json + episodes.jsonl) whose image root is
--image-root (default: the input's directory). With --qc, samples whose
instruction has fewer than 4 words or whose rationale has fewer than 10 are
dropped and counted as qc_failed.";

/// Convert grounding samples into navigation episodes.
#[derive(Debug, Args)]
#[command(long_about = GR2NAV_ABOUT)]
pub struct Gr2navArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Apply the instruction/rationale word-count gate.
    #[arg(long)]
    pub qc: bool,
}

const TRUNCATE_ABOUT: &str = "\
Cuts each episode at its first incorrect step.

Input: --dataset (manifest or episodes JSONL) and --flags, a JSONL file with
one line per episode:
  {\"episode\": ID, \"flags\": [{\"correct\": BOOL, \"correction\": {\"action\": ACTION,
   \"bbox\": [...]?}?}, ...]}
Every episode needs exactly one flag line with one flag per step. A corrected
step is kept with the correction as its only gold choice; an uncorrected one
is dropped with everything after it. Episodes left empty are dropped and
counted as empty_result.

Output: a dataset in --out sharing the source's image root.";

/// Apply first-error truncation to annotated episodes.
#[derive(Debug, Args)]
#[command(long_about = TRUNCATE_ABOUT)]
pub struct TruncateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub flags: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

const DEDUP_ABOUT: &str = "\
Drops near-duplicate instructions with a greedy first-wins scan: a record is
kept iff its instruction's character Levenshtein distance to every kept one
is at least --min-distance.

Input: a dataset manifest (.json), whose episodes are deduplicated and
written as a dataset to --out, or any JSONL file whose lines carry --field;
kept lines are copied verbatim to --out/<input file name>.";

/// Remove near-duplicate instructions.
#[derive(Debug, Args)]
#[command(long_about = DEDUP_ABOUT)]
pub struct DedupArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MIN_DISTANCE)]
    pub min_distance: usize,
    /// JSON field holding the instruction (JSONL input only).
    #[arg(long, default_value = "instruction")]
    pub field: String,
}

pub fn run(cmd: PipelineCommand, file: &FileConfig) -> Result<(), CliError> {
    let manifest = match &cmd {
        PipelineCommand::FilterGrounding(a) => filter_grounding(a, file)?,
        PipelineCommand::Gr2nav(a) => gr2nav_cmd(a)?,
        PipelineCommand::Truncate(a) => truncate(a)?,
        PipelineCommand::Dedup(a) => dedup(a)?,
    };
    let out = match &cmd {
        PipelineCommand::FilterGrounding(a) => &a.out,
        PipelineCommand::Gr2nav(a) => &a.out,
        PipelineCommand::Truncate(a) => &a.out,
        PipelineCommand::Dedup(a) => &a.out,
    };
    write_json(&out.join(PIPELINE_MANIFEST), &manifest)?;
    println!(
        "{}: {} in, {} out, dropped {:?}",
        manifest.stage, manifest.inputs, manifest.outputs, manifest.drops
    );
    Ok(())
}

fn input_dir(input: &Path) -> PathBuf {
    input.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PageRecord {
    id: String,
    #[serde(default)]
    app: Option<String>,
    screenshot: String,
    #[serde(default)]
    screen: Option<(u32, u32)>,
    root: UiElement,
}

#[derive(Debug, Serialize)]
struct Candidate<'a> {
    page: &'a str,
    app: Option<&'a str>,
    screenshot: &'a str,
    bbox: BBox,
    attributes: &'a ElementAttributes,
}

fn filter_grounding(a: &FilterArgs, file: &FileConfig) -> Result<PipelineManifest, CliError> {
    let mut cfg = file.filter.unwrap_or_default();
    let overrides = [
        (&mut cfg.min_area, a.min_area),
        (&mut cfg.max_aspect, a.max_aspect),
        (&mut cfg.max_screen_frac, a.max_screen_frac),
        (&mut cfg.uniform_color_var, a.uniform_color_var),
        (&mut cfg.seen_keep_prob, a.seen_keep_prob),
    ];
    for (slot, v) in overrides {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(s) = a.seed {
        cfg.rng_seed = s;
    }
    cfg.validate()?;

    let pages: Vec<PageRecord> = read_jsonl(&a.input)?;
    let image_root = a.image_root.clone().unwrap_or_else(|| input_dir(&a.input));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut seen = HashSet::new();
    let mut drops = DropCounts::default();
    let mut kept_rows = Vec::new();
    let mut inputs = 0u64;
    for page in &pages {
        let path = image_root.join(&page.screenshot);
        let img = image::open(&path)
            .map_err(|e| CliError::dataset(format!("page `{}`: {}: {e}", page.id, path.display())))?
            .to_rgb8();
        let screen = page.screen.unwrap_or(img.dimensions());
        let outcome = filter_elements(&page.root, screen, &img, &cfg, &mut seen, &mut rng)
            .map_err(|e| match e {
                PipelineError::InvalidConfig(_) => CliError::from(e),
                _ => CliError::dataset(format!("page `{}`: {e}", page.id)),
            })?;
        inputs += count_nodes(&page.root);
        drops.merge(&outcome.drops);
        for el in outcome.kept {
            kept_rows.push((page, el));
        }
    }
    let rows: Vec<Candidate> = kept_rows
        .iter()
        .map(|(p, el)| Candidate {
            page: &p.id,
            app: p.app.as_deref(),
            screenshot: &p.screenshot,
            bbox: el.bbox,
            attributes: &el.attributes,
        })
        .collect();
    create_dir(&a.out)?;
    write_jsonl(&a.out.join("candidates.jsonl"), &rows)?;
    Ok(PipelineManifest {
        stage: "filter-grounding".into(),
        config: serde_json::to_value(cfg).expect("config serializes"),
        seed: Some(cfg.rng_seed),
        inputs,
        outputs: rows.len() as u64,
        drops: drops.0.iter().map(|(r, n)| (r.as_str().to_string(), *n)).collect(),
    })
}

fn count_nodes(el: &UiElement) -> u64 {
    1 + el.children.iter().map(count_nodes).sum::<u64>()
}

fn gr2nav_cmd(a: &Gr2navArgs) -> Result<PipelineManifest, CliError> {
    let samples: Vec<GroundingSample> = read_jsonl(&a.input)?;
    let image_root = absolute(&a.image_root.clone().unwrap_or_else(|| input_dir(&a.input)))?;
    let mut drops = BTreeMap::new();
    let mut episodes = Vec::new();
    for (i, g) in samples.iter().enumerate() {
        if a.qc && !qc_instruction(&g.instruction, &g.rationale) {
            *drops.entry("qc_failed".to_string()).or_insert(0) += 1;
            continue;
        }
        let id = g.id.clone().unwrap_or_else(|| format!("gr{}", i + 1));
        episodes.push(gr2nav(g, id));
    }
    finish_dataset(&a.out, &episodes, &image_root)?;
    Ok(PipelineManifest {
        stage: "gr2nav".into(),
        config: serde_json::json!({"qc": a.qc}),
        seed: None,
        inputs: samples.len() as u64,
        outputs: episodes.len() as u64,
        drops,
    })
}

/// Writes a dataset and checks it loads, so a stage never emits something the
/// evaluator would reject.
fn finish_dataset(out: &Path, episodes: &[Episode], image_root: &Path) -> Result<(), CliError> {
    let manifest = write_dataset(out, episodes, image_root)?;
    Dataset::load(&manifest)
        .map(|_| ())
        .map_err(|e| CliError::dataset(format!("output failed validation: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlagRecord {
    episode: String,
    flags: Vec<StepFlag>,
}

fn truncate(a: &TruncateArgs) -> Result<PipelineManifest, CliError> {
    let ds = Dataset::load(&a.dataset)?;
    let records: Vec<FlagRecord> = read_jsonl(&a.flags)?;
    let mut flags: HashMap<&str, &[StepFlag]> = HashMap::new();
    for r in &records {
        if !ds.episodes.iter().any(|e| e.id == r.episode) {
            return Err(CliError::dataset(format!("{}: unknown episode `{}`", a.flags.display(), r.episode)));
        }
        if flags.insert(&r.episode, &r.flags).is_some() {
            return Err(CliError::dataset(format!("{}: duplicate flags for `{}`", a.flags.display(), r.episode)));
        }
    }
    let mut drops = BTreeMap::new();
    let mut out = Vec::new();
    for ep in &ds.episodes {
        let f = flags
            .get(ep.id.as_str())
            .ok_or_else(|| CliError::dataset(format!("{}: no flags for episode `{}`", a.flags.display(), ep.id)))?;
        match truncate_after_first_error(ep, f) {
            Ok(t) => {
                let cut = (ep.steps.len() - t.steps.len()) as u64;
                if cut > 0 {
                    *drops.entry("truncated_steps".to_string()).or_insert(0) += cut;
                }
                out.push(t);
            }
            Err(PipelineError::EmptyResult) => {
                *drops.entry("empty_result".to_string()).or_insert(0) += 1;
            }
            Err(e) => return Err(CliError::dataset(format!("episode `{}`: {e}", ep.id))),
        }
    }
    finish_dataset(&a.out, &out, &absolute(&ds.image_root)?)?;
    Ok(PipelineManifest {
        stage: "truncate".into(),
        config: serde_json::json!({}),
        seed: None,
        inputs: ds.episodes.len() as u64,
        outputs: out.len() as u64,
        drops,
    })
}

fn dedup(a: &DedupArgs) -> Result<PipelineManifest, CliError> {
    if a.min_distance == 0 {
        return Err(CliError::config("--min-distance must be positive"));
    }
    let is_jsonl = a.input.extension().is_some_and(|e| e == "jsonl");
    let (inputs, outputs) = if is_jsonl {
        let lines = read_lines(&a.input)?;
        let mut instructions = Vec::with_capacity(lines.len());
        for (n, line) in &lines {
            let v: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| CliError::dataset(format!("{}:{n}: {e}", a.input.display())))?;
            let s = v.get(&a.field).and_then(|s| s.as_str()).ok_or_else(|| {
                CliError::dataset(format!("{}:{n}: missing string field `{}`", a.input.display(), a.field))
            })?;
            instructions.push(s.to_string());
        }
        let kept = dedup_instructions(&instructions, a.min_distance);
        create_dir(&a.out)?;
        let name = a.input.file_name().expect("a file path");
        let out = a.out.join(name);
        let text: String = kept.iter().map(|&i| format!("{}\n", lines[i].1)).collect();
        std::fs::write(&out, text).map_err(|e| CliError::io(&out, e))?;
        (lines.len(), kept.len())
    } else {
        let ds = Dataset::load(&a.input)?;
        let instructions: Vec<&str> = ds.episodes.iter().map(|e| e.instruction.as_str()).collect();
        let kept = dedup_instructions(&instructions, a.min_distance);
        let episodes: Vec<Episode> = kept.iter().map(|&i| ds.episodes[i].clone()).collect();
        finish_dataset(&a.out, &episodes, &absolute(&ds.image_root)?)?;
        (ds.episodes.len(), episodes.len())
    };
    let mut drops = BTreeMap::new();
    drops.insert("near_duplicate".to_string(), (inputs - outputs) as u64);
    Ok(PipelineManifest {
        stage: "dedup".into(),
        config: serde_json::json!({"min_distance": a.min_distance, "field": a.field}),
        seed: None,
        inputs: inputs as u64,
        outputs: outputs as u64,
        drops,
    })
}

/// Non-blank lines with their 1-based line numbers.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::dataset(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}
