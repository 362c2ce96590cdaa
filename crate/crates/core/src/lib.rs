//! Turn-level credit assignment for multi-turn tool-calling rollouts.
//!
//! Predicted tool calls are matched against golden calls
//! ([`matching`]), converted into per-call rewards by hard Kuhn-Munkres
//! matching or soft entropic transport ([`assignment`]), averaged into
//! turn rewards with an answer-F1 outcome on the final turn ([`reward`]),
//! and finally normalized across a rollout group into trajectory- and
//! turn-level advantages ([`advantage`]).

pub mod advantage;
pub mod assignment;
pub mod config;
pub mod error;
pub mod matching;
pub mod pipeline;
pub mod reward;
pub mod trace;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
