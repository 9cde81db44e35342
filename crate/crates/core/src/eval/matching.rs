use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::action::{Action, BBox, SwipeDirection, TerminateStatus};

/// One acceptable answer for a step. A step may carry several.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GoldChoice {
    #[serde(rename = "click")]
    ClickTarget { bbox: BBox },
    #[serde(rename = "type")]
    TypeTarget { text: String },
    #[serde(rename = "swipe")]
    SwipeTarget { direction: SwipeDirection },
    #[serde(rename = "terminate")]
    TerminateTarget { status: TerminateStatus },
    /// Full structural equality; used for system buttons and waits.
    #[serde(rename = "exact")]
    ExactTarget { action: Action },
}

impl GoldChoice {
    /// The natural choice for a demonstrated action. Clicks need a box; a
    /// click without one falls back to an exact-coordinate target.
    pub fn for_action(action: &Action, bbox: Option<BBox>) -> GoldChoice {
        match action {
            Action::Click { .. } => match bbox {
                Some(bbox) => GoldChoice::ClickTarget { bbox },
                None => GoldChoice::ExactTarget {
                    action: action.clone(),
                },
            },
            Action::Type { text } => GoldChoice::TypeTarget { text: text.clone() },
            Action::Swipe { .. } => match action.swipe_direction() {
                Some(Ok(direction)) => GoldChoice::SwipeTarget { direction },
                _ => GoldChoice::ExactTarget {
                    action: action.clone(),
                },
            },
            Action::Terminate { status } => GoldChoice::TerminateTarget { status: *status },
            Action::SystemButton { .. } | Action::Wait { .. } => GoldChoice::ExactTarget {
                action: action.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchOptions {
    /// Compare typed text case-insensitively (after NFC and trimming).
    #[serde(default)]
    pub case_insensitive_type: bool,
}

/// Multi-choice correctness: true iff `predicted` satisfies any choice.
pub fn match_action(predicted: &Action, choices: &[GoldChoice]) -> bool {
    match_action_with(predicted, choices, MatchOptions::default())
}

pub fn match_action_with(predicted: &Action, choices: &[GoldChoice], opts: MatchOptions) -> bool {
    choices.iter().any(|c| matches_choice(predicted, c, opts))
}

fn matches_choice(predicted: &Action, choice: &GoldChoice, opts: MatchOptions) -> bool {
    match (predicted, choice) {
        (Action::Click { coordinate }, GoldChoice::ClickTarget { bbox }) => {
            bbox.contains(*coordinate)
        }
        (Action::Type { text }, GoldChoice::TypeTarget { text: gold }) => {
            let (a, b) = (normalize_text(text), normalize_text(gold));
            if opts.case_insensitive_type {
                a.to_lowercase() == b.to_lowercase()
            } else {
                a == b
            }
        }
        (Action::Swipe { .. }, GoldChoice::SwipeTarget { direction }) => {
            matches!(predicted.swipe_direction(), Some(Ok(d)) if d == *direction)
        }
        (Action::Terminate { status }, GoldChoice::TerminateTarget { status: gold }) => {
            status == gold
        }
        (_, GoldChoice::ExactTarget { action }) => predicted == action,
        _ => false,
    }
}

fn normalize_text(s: &str) -> String {
    let nfc: String = s.nfc().collect();
    nfc.trim().to_string()
}
