//! Claim-level reward GRPO for SOAP note generation.
//!
//! Reference claims are extracted once per dialogue and cached. During
//! training each sampled note is scored by claim recall (reference claims the
//! note entails) and claim precision (note claims the dialogue entails); the
//! scaled F1, optionally gated, is the reward that drives a group-mean
//! baseline policy-gradient update.
//!
//! The trainable policy is a per-fact inclusion model with exact
//! log-probabilities, so every piece of the update can be checked against
//! finite differences. [`judge`] talks to OpenAI-compatible endpoints for
//! remote extraction, entailment, note generation and pairwise judging;
//! [`report`] turns judge verdicts into plot-ready tables.

pub mod claims;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod grpo;
pub mod judge;
pub mod notes;
pub mod policy;
pub mod report;
pub mod reward;

pub use error::{Error, Result};
