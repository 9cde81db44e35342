//! Core library for evaluating and training mobile GUI navigation agents.

pub mod action;
pub mod agent;
pub mod dataset;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod rewards;
pub mod synth;
