use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::grammar::{loose_segments, TokenId, Vocabulary, NUM_DIMENSIONS};
use crate::rng;
use crate::PromptId;

/// Frozen conditioning encoder `h = φ(prompt, plan)`.
///
/// A fixed random projection of a sparse feature vector: the prompt one-hot
/// (prompt ids folded into `prompt_buckets`) concatenated with per-slot token
/// counts, where slot `k` is the `k`-th segment in order of appearance. Each
/// projection column is drawn on demand from a stream keyed by the feature,
/// so the matrix never has to be materialized and is identical across runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditionEncoder {
    pub seed: u64,
    pub dim: usize,
    pub prompt_buckets: u32,
}

impl Default for ConditionEncoder {
    fn default() -> Self {
        Self {
            seed: 17,
            dim: 16,
            prompt_buckets: 32,
        }
    }
}

impl ConditionEncoder {
    fn column(&self, tag: &str, index: u64) -> Vec<f64> {
        let mut r = rng::stream(self.seed, tag, index);
        let normal = Normal::new(0.0, (1.0 / (NUM_DIMENSIONS + 1) as f64).sqrt()).expect("finite std");
        (0..self.dim).map(|_| normal.sample(&mut r)).collect()
    }

    /// Encodes raw plan tokens; malformed or reordered plans are accepted.
    pub fn encode(&self, prompt: PromptId, tokens: &[TokenId], vocab: &Vocabulary) -> Vec<f64> {
        let mut h = self.column("flow/enc/prompt", u64::from(prompt.0 % self.prompt_buckets.max(1)));
        for (slot, seg) in loose_segments(tokens, vocab).iter().take(NUM_DIMENSIONS).enumerate() {
            for t in &seg.content {
                let text = vocab.text(*t).unwrap_or("");
                let col = self.column(&format!("flow/enc/slot/{text}"), slot as u64);
                h.iter_mut().zip(col).for_each(|(a, b)| *a += b);
            }
        }
        h
    }
}
