//! Gold-replay backend: emits an episode's demonstrated actions in order.

use crate::agent::{AgentTurnOutput, PromptBundle};
use crate::dataset::Episode;

use super::{estimated_usage, BackendError, BackendProvider, Completion, ModelBackend, Timing};

#[derive(Debug, Clone)]
pub struct ReplayBackend {
    turns: Vec<AgentTurnOutput>,
    next: usize,
}

impl ReplayBackend {
    pub fn new(episode: &Episode) -> Self {
        let turns = episode
            .steps
            .iter()
            .map(|step| AgentTurnOutput {
                semantic_context: step
                    .annotated_context
                    .clone()
                    .unwrap_or_else(|| format!("Completed step {} of the task.", step.index)),
                thought: step
                    .annotated_thought
                    .clone()
                    .unwrap_or_else(|| format!("Perform the demonstrated action for step {}.", step.index)),
                action: step.primary_action.clone(),
            })
            .collect();
        ReplayBackend { turns, next: 0 }
    }
}

impl ModelBackend for ReplayBackend {
    fn complete(&mut self, bundle: &PromptBundle) -> Result<Completion, BackendError> {
        let turn = self.turns.get(self.next).ok_or(BackendError::ExhaustedEpisode {
            steps: self.turns.len(),
        })?;
        self.next += 1;
        let text = turn.to_completion_text();
        Ok(Completion {
            usage: estimated_usage(bundle, &text),
            text,
            timing: Timing::zero(),
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReplayProvider;

impl BackendProvider for ReplayProvider {
    fn backend_for(
        &self,
        episode: &Episode,
    ) -> Result<Box<dyn ModelBackend + Send>, BackendError> {
        Ok(Box::new(ReplayBackend::new(episode)))
    }
}
