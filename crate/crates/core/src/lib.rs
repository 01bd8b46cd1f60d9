//! Outage-understanding toolkit: impact scope assessment over linked
//! incidents, summary/title generation through pluggable text backends,
//! text-generation metrics, and a deterministic synthetic corpus
//! generator for end-to-end verification.

pub mod backends;
pub mod domain;
pub mod eval;
pub mod scope;
pub mod store;
pub mod summarize;
pub mod synth;
