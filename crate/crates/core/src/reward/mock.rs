use std::collections::BTreeMap;

use crate::grammar::{loose_segments, ActionPlan, TokenId, Vocabulary, NUM_DIMENSIONS};
use crate::world::World;
use crate::PromptId;

use super::{OracleError, RewardOracle, ScoreDistribution};

/// Per-prompt lexicons consulted by the mock creativity judge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CreativityProfile {
    /// Actionable tokens per dimension (index 0 is dimension 1).
    pub actionable: Vec<Vec<TokenId>>,
    /// Tokens that introduce content absent from the input image.
    pub forbidden: Vec<TokenId>,
}

/// Deterministic stand-in for the MLLM reward model.
///
/// Alignment compares the candidate's segments position by position with the
/// reference plan: a segment carrying the wrong dimension tag (or a missing
/// segment) counts as fully different, otherwise the normalized token edit
/// distance of the contents is used. The mean distance `δ` maps to a score
/// distribution centered at `5 (1 - δ)`.
///
/// Creativity awards `5 k / 7` for `k` dimensions that carry one of the
/// prompt's actionable tokens, capped at 1 when any forbidden token appears.
#[derive(Debug, Clone)]
pub struct MockRewardOracle {
    vocab: Vocabulary,
    profiles: BTreeMap<PromptId, CreativityProfile>,
}

impl MockRewardOracle {
    pub fn new(vocab: Vocabulary, profiles: BTreeMap<PromptId, CreativityProfile>) -> Self {
        Self { vocab, profiles }
    }

    pub fn from_world(world: &World) -> Self {
        let profiles = world
            .profiles()
            .iter()
            .map(|p| {
                (
                    p.id,
                    CreativityProfile {
                        actionable: p.actionable.clone(),
                        forbidden: p.forbidden.clone(),
                    },
                )
            })
            .collect();
        Self::new(world.vocab.clone(), profiles)
    }

    /// Mean per-position distance in `[0, 1]` between candidate and reference.
    pub fn plan_distance(&self, candidate: &[TokenId], reference: &ActionPlan) -> f64 {
        let segs = loose_segments(candidate, &self.vocab);
        let total: f64 = reference
            .segments()
            .iter()
            .enumerate()
            .map(|(k, want)| match segs.get(k) {
                Some(got) if got.dimension == want.dimension => normalized_edit_distance(&got.content, &want.content),
                _ => 1.0,
            })
            .sum();
        total / NUM_DIMENSIONS as f64
    }

    pub fn creativity_center(&self, prompt: PromptId, candidate: &[TokenId]) -> f64 {
        let Some(profile) = self.profiles.get(&prompt) else {
            return 0.0;
        };
        let mut hit = [false; NUM_DIMENSIONS];
        for seg in loose_segments(candidate, &self.vocab) {
            let k = seg.dimension.index() - 1;
            if seg.content.iter().any(|t| profile.actionable[k].contains(t)) {
                hit[k] = true;
            }
        }
        let mut center = 5.0 * hit.iter().filter(|h| **h).count() as f64 / NUM_DIMENSIONS as f64;
        if candidate.iter().any(|t| profile.forbidden.contains(t)) {
            center = center.min(1.0);
        }
        center
    }
}

impl RewardOracle for MockRewardOracle {
    fn alignment(
        &self,
        _prompt: PromptId,
        candidate: &[TokenId],
        reference: &ActionPlan,
    ) -> Result<ScoreDistribution, OracleError> {
        let delta = self.plan_distance(candidate, reference);
        Ok(ScoreDistribution::standard_hat(5.0 * (1.0 - delta)))
    }

    fn creativity(&self, prompt: PromptId, candidate: &[TokenId]) -> Result<ScoreDistribution, OracleError> {
        Ok(ScoreDistribution::standard_hat(
            self.creativity_center(prompt, candidate),
        ))
    }
}

/// Levenshtein distance divided by the longer length (0 when both are empty).
pub fn normalized_edit_distance(a: &[TokenId], b: &[TokenId]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 0.0;
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()] as f64 / longest as f64
}
