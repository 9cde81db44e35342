//! Seeded synthetic datasets for smoke runs, benchmarks and tests.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::action::{Action, BBox, Point, SystemButton, TerminateStatus, WaitTime};
use crate::dataset::{write_dataset, DatasetError, Episode, EpisodeSource, StepRecord};
use crate::eval::GoldChoice;

#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub episodes: usize,
    pub steps: usize,
    pub screen: (u32, u32),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            episodes: 10,
            steps: 5,
            screen: (540, 1200),
            seed: 0,
        }
    }
}

fn random_bbox(rng: &mut impl Rng, (w, h): (u32, u32)) -> BBox {
    let min = 40.min(w / 4).min(h / 8).max(1);
    let bw = rng.random_range(min..=(w / 3).max(min));
    let bh = rng.random_range(min..=(h / 6).max(min));
    let x = rng.random_range(0..w - bw);
    let y = rng.random_range(0..h - bh);
    BBox::new(x, y, x + bw, y + bh).expect("non-empty box")
}

/// One step's action and gold choices. Clicks are scored by bbox, the rest
/// by their own family.
fn random_step(rng: &mut impl Rng, screen: (u32, u32)) -> (Action, Vec<GoldChoice>) {
    let (w, h) = screen;
    let action = match rng.random_range(0..10) {
        0..=4 => {
            let bbox = random_bbox(rng, screen);
            let c = bbox.center();
            let mut choices = vec![GoldChoice::ClickTarget { bbox }];
            if rng.random_bool(0.2) {
                choices.push(GoldChoice::SwipeTarget {
                    direction: crate::action::SwipeDirection::Up,
                });
            }
            return (Action::click(c.x, c.y), choices);
        }
        5 | 6 => {
            let x = rng.random_range(0..w);
            Action::swipe(Point::new(x, h * 3 / 4), Point::new(x, h / 4)).expect("distinct points")
        }
        7 => Action::type_text(format!("query {}", rng.random_range(0..1000))).expect("non-empty"),
        8 => Action::SystemButton {
            button: SystemButton::ALL[rng.random_range(0..SystemButton::ALL.len())],
        },
        _ => Action::Wait {
            time: WaitTime::new(f64::from(rng.random_range(1..5u8))).expect("positive"),
        },
    };
    let gold = GoldChoice::for_action(&action, None);
    (action, vec![gold])
}

fn screenshot(rng: &mut impl Rng, (w, h): (u32, u32)) -> RgbImage {
    let base: [u8; 3] = rng.random();
    // 8px checkerboard: only two distinct rows, so copy them instead of
    // computing every pixel
    let row = |phase: u32| -> Vec<u8> {
        (0..w)
            .flat_map(|x| {
                let v = ((x / 8 + phase) % 2) as u8 * 40;
                [base[0].wrapping_add(v), base[1].wrapping_add(v), base[2]]
            })
            .collect()
    };
    let rows = [row(0), row(1)];
    let mut buf = Vec::with_capacity((w * h * 3) as usize);
    for y in 0..h {
        buf.extend_from_slice(&rows[(y / 8 % 2) as usize]);
    }
    RgbImage::from_raw(w, h, buf).expect("buffer sized to the image")
}

/// Episodes only; screenshots are named `ep{i}_s{t}.png`.
pub fn synthetic_episodes(spec: &SynthSpec) -> Vec<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.episodes)
        .map(|i| {
            let steps = (1..=spec.steps)
                .map(|t| {
                    let (primary_action, gold_choices) = if t == spec.steps {
                        let a = Action::Terminate {
                            status: TerminateStatus::Success,
                        };
                        let g = GoldChoice::for_action(&a, None);
                        (a, vec![g])
                    } else {
                        random_step(&mut rng, spec.screen)
                    };
                    StepRecord {
                        index: t as u32,
                        screenshot: format!("ep{i}_s{t}.png"),
                        primary_action,
                        gold_choices,
                        annotated_context: Some(format!("completed {} of {} steps", t, spec.steps)),
                        annotated_thought: Some(format!("step {t}")),
                    }
                })
                .collect();
            Episode {
                id: format!("ep{i}"),
                app: ["clock", "mail", "maps"][i % 3].to_string(),
                instruction: format!("synthetic task number {i} with {} steps", spec.steps),
                source: Some(EpisodeSource::Human),
                parent_id: None,
                steps,
            }
        })
        .collect()
}

/// Writes screenshots and a loadable dataset under `dir`; returns the
/// manifest path.
pub fn write_synthetic_dataset(dir: &Path, spec: &SynthSpec) -> Result<PathBuf, DatasetError> {
    let episodes = synthetic_episodes(spec);
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| DatasetError::io(&images, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    for ep in &episodes {
        for step in &ep.steps {
            let path = images.join(&step.screenshot);
            screenshot(&mut rng, spec.screen)
                .save(&path)
                .map_err(|e| DatasetError::Image {
                    episode: ep.id.clone(),
                    step: step.index,
                    path: path.clone(),
                    message: e.to_string(),
                })?;
        }
    }
    write_dataset(dir, &episodes, Path::new("images"))
}
