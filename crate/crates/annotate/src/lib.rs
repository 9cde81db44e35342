//! Annotation service for navigation trajectories.
//!
//! Annotators step through each episode in order, confirm or correct every
//! action, draw boxes for clicks and add alternative gold choices. State is
//! an event-sourced fold over an append-only log, so a restart reproduces it
//! exactly. Finished work exports as an evaluation dataset.

pub mod api;
pub mod store;

pub use api::{router, serve, AppState};
pub use store::{
    AnnotateError, EpisodeState, Event, ExportSummary, Judgment, Lease, Review, Status, Store,
    Verdict,
};
