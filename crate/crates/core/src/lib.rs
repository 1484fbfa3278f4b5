//! Event-study engine for token markets around scheduled matches.
//!
//! The pipeline runs bars → returns / log-volume → expectation model fits →
//! abnormal series → per-event CAR/CAV → cross-sectional tests, with a
//! separate determinants layer (OLS and MM regressions) over full-match
//! outcomes, and a de-vigging classifier for bookmaker odds.

pub mod determinants;
pub mod events;
pub mod inference;
pub mod models;
pub mod odds;
pub mod parallel;
pub mod report;
pub mod synthetic;
pub mod timeseries;

pub use parallel::Execution;
