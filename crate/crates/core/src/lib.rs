//! Toolkit for finding, characterizing, probing and mitigating Rock Tokens:
//! token types whose per-token on-policy distillation loss stays high across
//! training and recurs in similar local contexts.
//!
//! The modules follow the analysis pipeline:
//!
//! * [`trace`] reads and writes the line-delimited trace format.
//! * [`stats`] holds the statistical kernels (rank tests, bootstrap, corrections).
//! * [`detect`] scores token types and selects the context-consistent rock set.
//! * [`cutoff`] picks the rock-set size from stability and loss coverage.
//! * [`gradgeom`] analyses per-token logit-space gradients and persistence.
//! * [`knockout`] runs decode-time logit bans and the pillar census.
//! * [`reweight`] builds window-aware loss masks.
//! * [`simlab`] is a tabular distillation simulator with planted ground truth.

pub mod cutoff;
pub mod detect;
pub mod gradgeom;
pub mod knockout;
pub mod numeric;
pub mod reweight;
pub mod rng;
pub mod simlab;
pub mod stats;
pub mod trace;

pub use trace::{Corpus, TokenId, TrajectoryTrace, TruncatedDist, Vocabulary};
