//! Journal-entry anomaly detection.
//!
//! The pipeline scores ledger postings with rule-based journal-entry tests
//! ([`jet`]), an isolation forest ([`iforest`]) and a language model reached
//! through [`gateway`], whose prompts are assembled by [`prompt`] from
//! dataset context ([`stats`]). [`eval`] turns verdicts into confusion counts
//! and metrics; [`pipeline`] wires the stages into reproducible runs.

pub mod eval;
pub mod gateway;
pub mod iforest;
pub mod jet;
pub mod ledger;
pub mod pipeline;
pub mod prompt;
pub mod stats;
pub mod synthgen;
