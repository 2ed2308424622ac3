//! Grammar-constrained neural semantic parsing with replay-based continual
//! learning.
//!
//! The library is organized bottom-up:
//!
//! * [`lf`] — s-expression logical forms, triple extraction, and a
//!   graph-matching similarity between trees.
//! * [`grammar`] — task grammars, the transition system (APPLY / GEN
//!   actions), and a global append-only action registry shared across tasks.
//! * [`nn`] — a small reverse-mode autodiff tape, parameter storage with
//!   global / task-specific partitions, and the encoder–decoder parser
//!   built on top of them.
//! * [`sampling`] — memory selection strategies for replay training
//!   (random, feature clustering, tree-distance clustering, and
//!   entropy-maximizing diversified selection).
//! * [`corpus`] — JSONL corpus I/O and a deterministic synthetic task
//!   generator.
//! * [`eval`] — exact-match accuracy, aggregate continual-learning metrics,
//!   and per-action probability traces.
//! * [`trainer`] — the fast/slow two-stage continual training loop with
//!   replay and a quadratic parameter-anchoring penalty.
//! * [`harness`] — experiment configuration, the run/report/sample/generate
//!   commands used by the `semparse` binary, and CSV/SVG emitters.
//!
//! All randomness flows through explicitly seeded generators and all
//! iteration orders are fixed, so every public entry point is deterministic:
//! the same inputs and seed produce bitwise-identical results.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod grammar;
pub mod harness;
pub mod lf;
pub mod nn;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
