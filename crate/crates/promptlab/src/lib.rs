//! promptlab: an empirical prompt optimization and evaluation harness for
//! binary text classification with LLM backends.
//!
//! The library covers the full protocol: load a labeled corpus, split it at
//! the participant level, assemble baseline prompts from codebook components,
//! search for the best and worst baselines, run automatic prompt engineering,
//! sample few-shot example sets, apply additive decorators (persona,
//! chain-of-thought, explanations), evaluate everything with bootstrap
//! statistics, and render the results as tables and plots. A deterministic
//! mock backend makes every stage runnable and testable offline.

pub mod backend;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod promptkit;
pub mod report;
pub mod search;
pub mod util;

pub use error::{Error, Result};
