//! Reward scoring for sampled plans.
//!
//! An oracle returns a probability distribution over discrete score tokens
//! rather than a single number. The engine takes the expectation of that
//! distribution, rescales it to `[0, 1]`, and mixes it with the binary format
//! reward using fixed weights:
//!
//! ```text
//! R(X)   = sum_s v(s) * p(s | X)
//! R̄(X)   = (R(X) - min v) / (max v - min v)
//! r      = λ_f * R_f + λ_a * R̄_a + λ_c * R̄_c
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{format_reward, ActionPlan, TokenId, Vocabulary};
use crate::PromptId;

mod mock;
mod remote;

pub use mock::{CreativityProfile, MockRewardOracle};
pub use remote::{OracleRequest, OracleResponse, QueryKind, RemoteOracleConfig, RemoteRewardOracle, TOKEN_ENV};

/// Score token values `{0, 1, 2, 3, 4, 5}`.
pub const STANDARD_SCORE_VALUES: [f64; 6] = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoreError {
    #[error("values and probabilities differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("score values must be finite and strictly increasing")]
    UnorderedValues,
    #[error("probabilities must be finite, non-negative and sum to 1 (sum = {0})")]
    BadProbabilities(f64),
    #[error("degenerate score range: min equals max")]
    DegenerateRange,
}

/// Distribution over ordered score tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    values: Vec<f64>,
    probs: Vec<f64>,
}

impl ScoreDistribution {
    pub fn new(values: Vec<f64>, probs: Vec<f64>) -> Result<Self, ScoreError> {
        if values.len() != probs.len() || values.is_empty() {
            return Err(ScoreError::LengthMismatch(values.len(), probs.len()));
        }
        if values.iter().any(|v| !v.is_finite()) || values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ScoreError::UnorderedValues);
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(ScoreError::BadProbabilities(sum));
        }
        Ok(Self { values, probs })
    }

    /// Renormalizes non-negative weights over the score tokens.
    pub fn from_weights(values: Vec<f64>, weights: Vec<f64>) -> Result<Self, ScoreError> {
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || !(sum > 0.0 && sum.is_finite()) {
            return Err(ScoreError::BadProbabilities(sum));
        }
        Self::new(values, weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn standard(probs: [f64; 6]) -> Result<Self, ScoreError> {
        Self::new(STANDARD_SCORE_VALUES.to_vec(), probs.to_vec())
    }

    pub fn point_mass(values: Vec<f64>, index: usize) -> Result<Self, ScoreError> {
        let mut probs = vec![0.0; values.len()];
        if let Some(p) = probs.get_mut(index) {
            *p = 1.0;
        }
        Self::new(values, probs)
    }

    /// Splits mass between the two standard tokens adjacent to `center`
    /// (clamped to `[0, 5]`), so the expectation equals the center and an
    /// integral center is a point mass.
    pub fn standard_hat(center: f64) -> Self {
        let c = center.clamp(0.0, 5.0);
        let lo = c.floor().min(4.0);
        let frac = c - lo;
        let mut probs = [0.0; 6];
        probs[lo as usize] = 1.0 - frac;
        probs[lo as usize + 1] += frac;
        Self::standard(probs).expect("hat distribution is valid by construction")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

pub fn expected_score(d: &ScoreDistribution) -> f64 {
    d.values.iter().zip(&d.probs).map(|(v, p)| v * p).sum()
}

pub fn normalize_score(raw: f64, values: &[f64]) -> Result<f64, ScoreError> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi.is_nan() || lo.is_nan() || hi <= lo {
        return Err(ScoreError::DegenerateRange);
    }
    Ok(((raw - lo) / (hi - lo)).clamp(0.0, 1.0))
}

/// Expected score mapped to `[0, 1]`.
pub fn normalized_expected(d: &ScoreDistribution) -> Result<f64, ScoreError> {
    normalize_score(expected_score(d), d.values())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub format: f64,
    pub alignment: f64,
    pub creativity: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            format: 0.1,
            alignment: 0.5,
            creativity: 0.4,
        }
    }
}

impl RewardWeights {
    pub fn is_valid(&self) -> bool {
        [self.format, self.alignment, self.creativity]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
    }

    pub fn total(&self) -> f64 {
        self.format + self.alignment + self.creativity
    }
}

pub fn combine_rewards(format: u8, alignment: f64, creativity: f64, w: &RewardWeights) -> f64 {
    w.format * f64::from(format) + w.alignment * alignment + w.creativity * creativity
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: u8,
    pub alignment: f64,
    pub creativity: f64,
    pub combined: f64,
    pub weights: RewardWeights,
    pub alignment_raw: ScoreDistribution,
    pub creativity_raw: ScoreDistribution,
}

impl RewardBreakdown {
    /// Recomputes the combined reward from the stored components.
    pub fn recombine(&self) -> f64 {
        combine_rewards(self.format, self.alignment, self.creativity, &self.weights)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("oracle unavailable: {0}")]
    Unavailable(String),
    #[error("oracle returned a malformed response: {0}")]
    Malformed(String),
}

impl From<ScoreError> for OracleError {
    fn from(e: ScoreError) -> Self {
        OracleError::Malformed(e.to_string())
    }
}

/// Judges a candidate plan. Implementations must be deterministic for
/// identical inputs.
pub trait RewardOracle: Sync {
    /// Do the candidate and the reference express the same editing intent?
    fn alignment(
        &self,
        prompt: PromptId,
        candidate: &[TokenId],
        reference: &ActionPlan,
    ) -> Result<ScoreDistribution, OracleError>;

    /// Is the candidate actionable, and does it avoid inventing new content?
    fn creativity(&self, prompt: PromptId, candidate: &[TokenId]) -> Result<ScoreDistribution, OracleError>;
}

/// Scores one rollout. All three components are always computed, even for
/// plans that fail the format check.
pub fn score_rollout(
    tokens: &[TokenId],
    reference: &ActionPlan,
    prompt: PromptId,
    oracle: &dyn RewardOracle,
    weights: &RewardWeights,
    vocab: &Vocabulary,
) -> Result<RewardBreakdown, OracleError> {
    let format = format_reward(tokens, vocab);
    let alignment_raw = oracle.alignment(prompt, tokens, reference)?;
    let creativity_raw = oracle.creativity(prompt, tokens)?;
    let alignment = normalized_expected(&alignment_raw)?;
    let creativity = normalized_expected(&creativity_raw)?;
    Ok(RewardBreakdown {
        format,
        alignment,
        creativity,
        combined: combine_rewards(format, alignment, creativity, weights),
        weights: *weights,
        alignment_raw,
        creativity_raw,
    })
}

/// Scores a batch of candidates with at most `parallelism` concurrent oracle
/// calls. Results come back in input order.
pub fn score_batch(
    candidates: &[Vec<TokenId>],
    reference: &ActionPlan,
    prompt: PromptId,
    oracle: &dyn RewardOracle,
    weights: &RewardWeights,
    vocab: &Vocabulary,
    parallelism: usize,
) -> Result<Vec<RewardBreakdown>, OracleError> {
    let score = |c: &Vec<TokenId>| score_rollout(c, reference, prompt, oracle, weights, vocab);
    if parallelism <= 1 || candidates.len() <= 1 {
        return candidates.iter().map(score).collect();
    }
    let chunk = candidates.len().div_ceil(parallelism);
    std::thread::scope(|s| {
        let handles: Vec<_> = candidates
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(score).collect::<Result<Vec<_>, _>>()))
            .collect();
        let mut out = Vec::with_capacity(candidates.len());
        for h in handles {
            out.extend(h.join().expect("scoring thread panicked")?);
        }
        Ok(out)
    })
}
