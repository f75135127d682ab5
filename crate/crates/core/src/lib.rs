//! Desk-scale aesthetic photo reconstruction stack.
//!
//! Stage 1 trains a planner that emits seven-dimension action plans
//! ([`grammar`], [`policy`], [`sft`], [`grpo`], [`reward`]). Stage 2 trains an
//! action-conditioned rectified-flow editor over small latents ([`flow`]).
//! [`corpus`] mines aligned (poor, good) pairs from synthetic tutorial videos
//! and [`eval`] runs the pairwise evaluation. Everything that would call a
//! large model sits behind an oracle trait with a deterministic mock.

use serde::{Deserialize, Serialize};

pub mod config;
pub mod corpus;
pub mod eval;
pub mod flow;
pub mod grammar;
pub mod grpo;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod runner;
pub mod sft;
pub mod stats;
pub mod world;

/// Discrete stand-in for a (poor image, instruction) input: a scene profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptId(pub u32);

impl std::fmt::Display for PromptId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}
