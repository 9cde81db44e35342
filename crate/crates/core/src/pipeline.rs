//! Data construction: grounding-candidate filtering, instruction QC,
//! grounding-to-navigation conversion, first-error truncation and
//! instruction dedup.

use std::collections::{BTreeMap, HashSet};

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_segmentation::UnicodeSegmentation;

use crate::action::{Action, BBox};
use crate::dataset::{Episode, StepRecord};
use crate::eval::GoldChoice;

pub const MIN_INSTRUCTION_WORDS: usize = 4;
pub const MIN_RATIONALE_WORDS: usize = 10;
pub const DEFAULT_MIN_DISTANCE: usize = 6;
/// Grid used when hashing element positions.
pub const SIGNATURE_GRID: u32 = 32;

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("element bbox {bbox:?} exceeds the {width}x{height} screenshot")]
    CropOutOfBounds {
        bbox: [u32; 4],
        width: u32,
        height: u32,
    },
    #[error("screen is {screen:?} but the screenshot is {image:?}")]
    ScreenMismatch { screen: (u32, u32), image: (u32, u32) },
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
    #[error("first step is incorrect and has no correction; nothing survives")]
    EmptyResult,
    #[error("{flags} correctness flags for {steps} steps")]
    FlagMismatch { flags: usize, steps: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ElementAttributes {
    #[serde(default)]
    pub resource_id: Option<String>,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub class: Option<String>,
    #[serde(default)]
    pub clickable: bool,
}

/// One node of a page-structure tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UiElement {
    pub bbox: BBox,
    #[serde(default)]
    pub attributes: ElementAttributes,
    #[serde(default)]
    pub children: Vec<UiElement>,
}

impl UiElement {
    pub fn leaf(bbox: BBox) -> Self {
        UiElement {
            bbox,
            attributes: ElementAttributes::default(),
            children: Vec::new(),
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Leaves in document (pre-order) order.
    pub fn leaves(&self) -> Vec<&UiElement> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(node) = stack.pop() {
            if node.is_leaf() {
                out.push(node);
            } else {
                stack.extend(node.children.iter().rev());
            }
        }
        out
    }

    pub fn signature(&self) -> ElementSignature {
        ElementSignature::of(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ElementSignature(pub [u8; 32]);

impl ElementSignature {
    pub fn of(el: &UiElement) -> Self {
        let mut h = Sha256::new();
        for part in [&el.attributes.resource_id, &el.attributes.text] {
            match part {
                Some(s) => {
                    h.update([1u8]);
                    h.update((s.len() as u64).to_le_bytes());
                    h.update(s.as_bytes());
                }
                None => h.update([0u8]),
            }
        }
        for v in el.bbox.to_array() {
            h.update((v / SIGNATURE_GRID).to_le_bytes());
        }
        ElementSignature(h.finalize().into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub min_area: f64,
    pub max_aspect: f64,
    pub max_screen_frac: f64,
    pub uniform_color_var: f64,
    pub seen_keep_prob: f64,
    pub rng_seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_area: 6000.0,
            max_aspect: 13.5,
            max_screen_frac: 0.15,
            uniform_color_var: 25.0,
            seen_keep_prob: 0.05,
            rng_seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let positive = [
            ("min_area", self.min_area),
            ("max_aspect", self.max_aspect),
            ("max_screen_frac", self.max_screen_frac),
            ("uniform_color_var", self.uniform_color_var),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(PipelineError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.seen_keep_prob) {
            return Err(PipelineError::InvalidConfig(format!(
                "seen_keep_prob must be in [0, 1], got {}",
                self.seen_keep_prob
            )));
        }
        Ok(())
    }
}

/// Why an element was dropped. The first failing rule is recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    NotLeaf,
    SmallArea,
    ExtremeAspect,
    LargeArea,
    UniformColor,
    SeenBefore,
}

impl DropReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            DropReason::NotLeaf => "not_leaf",
            DropReason::SmallArea => "small_area",
            DropReason::ExtremeAspect => "extreme_aspect",
            DropReason::LargeArea => "large_area",
            DropReason::UniformColor => "uniform_color",
            DropReason::SeenBefore => "seen_before",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts(pub BTreeMap<DropReason, u64>);

impl DropCounts {
    pub fn bump(&mut self, reason: DropReason, by: u64) {
        *self.0.entry(reason).or_default() += by;
    }

    pub fn get(&self, reason: DropReason) -> u64 {
        self.0.get(&reason).copied().unwrap_or(0)
    }

    pub fn merge(&mut self, other: &DropCounts) {
        for (&r, &n) in &other.0 {
            self.bump(r, n);
        }
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<UiElement>,
    pub drops: DropCounts,
}

/// Geometric rules only; `None` means the element passes them.
pub fn geometric_rejection(bbox: &BBox, screen: (u32, u32), cfg: &FilterConfig) -> Option<DropReason> {
    let area = bbox.area() as f64;
    let (w, h) = (f64::from(bbox.width()), f64::from(bbox.height()));
    let screen_area = f64::from(screen.0) * f64::from(screen.1);
    if area < cfg.min_area {
        Some(DropReason::SmallArea)
    } else if (w / h).max(h / w) > cfg.max_aspect {
        Some(DropReason::ExtremeAspect)
    } else if area > cfg.max_screen_frac * screen_area {
        Some(DropReason::LargeArea)
    } else {
        None
    }
}

/// Population variance of each RGB channel over the bbox crop.
pub fn channel_variance(img: &RgbImage, bbox: &BBox) -> Result<[f64; 3], PipelineError> {
    if bbox.x_max() > img.width() || bbox.y_max() > img.height() {
        return Err(PipelineError::CropOutOfBounds {
            bbox: bbox.to_array(),
            width: img.width(),
            height: img.height(),
        });
    }
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    for y in bbox.y_min()..bbox.y_max() {
        for x in bbox.x_min()..bbox.x_max() {
            let p = img.get_pixel(x, y).0;
            for c in 0..3 {
                let v = f64::from(p[c]);
                sum[c] += v;
                sq[c] += v * v;
            }
        }
    }
    let n = bbox.area() as f64;
    Ok(std::array::from_fn(|c| {
        let mean = sum[c] / n;
        (sq[c] / n - mean * mean).max(0.0)
    }))
}

/// Keeps grounding candidates from one page.
///
/// Rules run in order: leaf, area, aspect, screen coverage, colour
/// uniformity, then seen-before downsampling. The crop is only taken for
/// elements that pass the geometric rules, so `CropOutOfBounds` fires for
/// those alone.
pub fn filter_elements<R: Rng + ?Sized>(
    root: &UiElement,
    screen: (u32, u32),
    screenshot: &RgbImage,
    cfg: &FilterConfig,
    seen: &mut HashSet<ElementSignature>,
    rng: &mut R,
) -> Result<FilterOutcome, PipelineError> {
    cfg.validate()?;
    if screen.0 == 0 || screen.1 == 0 || screenshot.dimensions() != screen {
        return Err(PipelineError::ScreenMismatch {
            screen,
            image: screenshot.dimensions(),
        });
    }
    let mut drops = DropCounts::default();
    let mut kept = Vec::new();
    let mut stack = vec![root];
    while let Some(node) = stack.pop() {
        if !node.is_leaf() {
            drops.bump(DropReason::NotLeaf, 1);
            stack.extend(node.children.iter().rev());
            continue;
        }
        if let Some(reason) = geometric_rejection(&node.bbox, screen, cfg) {
            drops.bump(reason, 1);
            continue;
        }
        let var = channel_variance(screenshot, &node.bbox)?;
        if var.iter().all(|&v| v < cfg.uniform_color_var) {
            drops.bump(DropReason::UniformColor, 1);
            continue;
        }
        let sig = node.signature();
        if seen.contains(&sig) && rng.random::<f64>() >= cfg.seen_keep_prob {
            drops.bump(DropReason::SeenBefore, 1);
            continue;
        }
        seen.insert(sig);
        kept.push(UiElement {
            children: Vec::new(),
            ..node.clone()
        });
    }
    Ok(FilterOutcome { kept, drops })
}

/// Words by Unicode segmentation; every CJK ideograph is its own word.
pub fn word_count(text: &str) -> usize {
    text.unicode_words().count()
}

pub fn qc_instruction(instruction: &str, rationale: &str) -> bool {
    word_count(instruction) >= MIN_INSTRUCTION_WORDS && word_count(rationale) >= MIN_RATIONALE_WORDS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundingSample {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub app: Option<String>,
    pub instruction: String,
    pub rationale: String,
    pub screenshot: String,
    pub target: BBox,
}

/// A single-step episode that clicks the target's centre.
pub fn gr2nav(g: &GroundingSample, id: impl Into<String>) -> Episode {
    let click = Action::Click {
        coordinate: g.target.center(),
    };
    Episode {
        id: id.into(),
        app: g.app.clone().unwrap_or_else(|| "grounding".into()),
        instruction: g.instruction.clone(),
        source: None,
        parent_id: None,
        steps: vec![StepRecord {
            index: 1,
            screenshot: g.screenshot.clone(),
            primary_action: click,
            gold_choices: vec![GoldChoice::ClickTarget { bbox: g.target }],
            annotated_context: None,
            annotated_thought: None,
        }],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Correction {
    pub action: Action,
    #[serde(default)]
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepFlag {
    pub correct: bool,
    #[serde(default)]
    pub correction: Option<Correction>,
}

impl StepFlag {
    pub fn ok() -> Self {
        StepFlag {
            correct: true,
            correction: None,
        }
    }

    pub fn wrong(correction: Option<Correction>) -> Self {
        StepFlag {
            correct: false,
            correction,
        }
    }
}

/// Cuts the episode at its first incorrect step. A corrected step is kept
/// with the correction as its only gold choice; an uncorrected one is
/// dropped along with everything after it.
pub fn truncate_after_first_error(
    episode: &Episode,
    flags: &[StepFlag],
) -> Result<Episode, PipelineError> {
    if flags.len() != episode.steps.len() {
        return Err(PipelineError::FlagMismatch {
            flags: flags.len(),
            steps: episode.steps.len(),
        });
    }
    let mut out = episode.clone();
    let Some(e) = flags.iter().position(|f| !f.correct) else {
        return Ok(out);
    };
    out.steps.truncate(e + 1);
    match &flags[e].correction {
        Some(c) => {
            let step = &mut out.steps[e];
            step.primary_action = c.action.clone();
            step.gold_choices = vec![GoldChoice::for_action(&c.action, c.bbox)];
            step.annotated_context = None;
            step.annotated_thought = None;
        }
        None => {
            out.steps.truncate(e);
        }
    }
    if out.steps.is_empty() {
        return Err(PipelineError::EmptyResult);
    }
    Ok(out)
}

pub fn instruction_distance(a: &str, b: &str) -> usize {
    strsim::levenshtein(a, b)
}

/// Greedy first-wins selection; returns the indices kept.
pub fn dedup_instructions<S: AsRef<str>>(instructions: &[S], min_distance: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for (i, s) in instructions.iter().enumerate() {
        let s = s.as_ref();
        if kept
            .iter()
            .all(|&k| instruction_distance(instructions[k].as_ref(), s) >= min_distance)
        {
            kept.push(i);
        }
    }
    kept
}

/// Written next to every pipeline output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub stage: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: u64,
    pub outputs: u64,
    pub drops: BTreeMap<String, u64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bb(a: u32, b: u32, c: u32, d: u32) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    fn noisy(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let v = ((x * 37 + y * 91) % 256) as u8;
            Rgb([v, v.wrapping_mul(3), v.wrapping_add(77)])
        })
    }

    fn run(root: &UiElement, img: &RgbImage) -> FilterOutcome {
        let mut seen = HashSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        filter_elements(root, img.dimensions(), img, &FilterConfig::default(), &mut seen, &mut rng)
            .unwrap()
    }

    #[test]
    fn long_thin_strip_rejected() {
        let img = noisy(1080, 2400);
        let out = run(&UiElement::leaf(bb(0, 0, 1400.min(1080), 100)), &img);
        // 1080x100 is 10.8:1 and passes; the 14:1 case is checked geometrically
        assert_eq!(out.kept.len(), 1);
        assert_eq!(
            geometric_rejection(&bb(0, 0, 1400, 100), (1080, 2400), &FilterConfig::default()),
            Some(DropReason::ExtremeAspect)
        );
    }

    #[test]
    fn solid_crop_rejected() {
        let mut img = noisy(400, 400);
        for y in 0..100 {
            for x in 0..100 {
                img.put_pixel(x, y, Rgb([10, 200, 30]));
            }
        }
        let out = run(&UiElement::leaf(bb(0, 0, 100, 100)), &img);
        assert!(out.kept.is_empty());
        assert_eq!(out.drops.get(DropReason::UniformColor), 1);
    }

    #[test]
    fn only_leaves_survive_in_document_order() {
        let img = noisy(1000, 1000);
        let tree = UiElement {
            bbox: bb(0, 0, 1000, 1000),
            attributes: ElementAttributes::default(),
            children: vec![
                UiElement {
                    bbox: bb(0, 0, 500, 500),
                    attributes: ElementAttributes::default(),
                    children: vec![UiElement::leaf(bb(0, 0, 100, 100)), UiElement::leaf(bb(100, 0, 200, 100))],
                },
                UiElement::leaf(bb(600, 600, 700, 700)),
            ],
        };
        let out = run(&tree, &img);
        let boxes: Vec<_> = out.kept.iter().map(|e| e.bbox.to_array()).collect();
        assert_eq!(boxes, vec![[0, 0, 100, 100], [100, 0, 200, 100], [600, 600, 700, 700]]);
        assert_eq!(out.drops.get(DropReason::NotLeaf), 2);
    }

    #[test]
    fn out_of_bounds_crop() {
        let img = noisy(200, 200);
        let mut seen = HashSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = FilterConfig {
            max_screen_frac: 1.0,
            ..FilterConfig::default()
        };
        let err = filter_elements(&UiElement::leaf(bb(150, 150, 250, 250)), (200, 200), &img, &cfg, &mut seen, &mut rng)
            .unwrap_err();
        assert!(matches!(err, PipelineError::CropOutOfBounds { .. }));
    }

    #[test]
    fn signature_quantizes_position() {
        let a = UiElement::leaf(bb(0, 0, 100, 100));
        let b = UiElement::leaf(bb(5, 3, 120, 110));
        let c = UiElement::leaf(bb(40, 0, 140, 100));
        assert_eq!(a.signature(), b.signature());
        assert_ne!(a.signature(), c.signature());
    }

    #[test]
    fn qc_boundaries() {
        let ten = "one two three four five six seven eight nine ten";
        assert!(!qc_instruction("click it", ten));
        assert!(qc_instruction("open the alarm app", ten));
        assert!(!qc_instruction("open the alarm app", "one two three four five six seven eight nine"));
        assert_eq!(word_count("打开闹钟"), 4);
    }

    #[test]
    fn gr2nav_centres() {
        let g = GroundingSample {
            id: None,
            app: None,
            instruction: "tap the thing".into(),
            rationale: String::new(),
            screenshot: "a.png".into(),
            target: bb(100, 200, 300, 400),
        };
        let ep = gr2nav(&g, "g1");
        assert_eq!(ep.steps[0].primary_action, Action::click(200, 300));
        ep.validate().unwrap();
        let g = GroundingSample { target: bb(0, 0, 3, 3), ..g };
        assert_eq!(gr2nav(&g, "g2").steps[0].primary_action, Action::click(1, 1));
    }

    #[test]
    fn dedup_examples() {
        assert_eq!(dedup_instructions(&["open alarm app", "open alarm app!"], 6), vec![0]);
        assert_eq!(dedup_instructions(&["abcdef", "ghijkl"], 6), vec![0, 1]);
        assert_eq!(dedup_instructions(&["x"], 6), vec![0]);
    }
}
