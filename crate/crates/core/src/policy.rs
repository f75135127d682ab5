//! Autoregressive categorical policy with exact conditionals.
//!
//! Logits live in a sparse table keyed by (prompt, previous token, position
//! bucket). A missing row means all-zero logits, so a fresh policy is uniform.
//! Every conditional is a softmax of `logits / temperature`, which makes exact
//! KL divergences and exact log-likelihood gradients cheap.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::TokenId;
use crate::rng;
use crate::PromptId;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Previous-token slot used at the first decoding step.
const BOS: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("token id {id} at position {pos} is outside the vocabulary of size {vocab}")]
    UnknownToken { pos: usize, id: u32, vocab: usize },
    #[error("checkpoint vocabulary {found} does not match the active vocabulary {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid policy configuration: {0}")]
    BadConfig(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint decode: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub temperature: f64,
    pub bucket_width: usize,
    pub max_len: usize,
    /// Generation stops after emitting this token.
    pub end_token: Option<TokenId>,
}

impl PolicyConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            temperature: 1.0,
            bucket_width: 4,
            max_len: 64,
            end_token: None,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.vocab_size == 0 {
            return Err(PolicyError::BadConfig("empty vocabulary".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(PolicyError::BadConfig(format!("temperature {}", self.temperature)));
        }
        if self.bucket_width == 0 || self.max_len == 0 {
            return Err(PolicyError::BadConfig(
                "bucket width and max_len must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub prompt: u32,
    pub prev: u32,
    pub bucket: u32,
}

/// Sparse row-major table of per-context vectors (logits or gradients).
pub type RowTable = BTreeMap<RowKey, Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    config: PolicyConfig,
    rows: RowTable,
}

/// A sparse gradient over policy logits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyGrad {
    pub rows: RowTable,
}

impl PolicyGrad {
    pub fn add_row(&mut self, key: RowKey, values: &[f64], scale: f64) {
        let row = self.rows.entry(key).or_insert_with(|| vec![0.0; values.len()]);
        row.iter_mut().zip(values).for_each(|(r, v)| *r += scale * v);
    }

    pub fn merge(&mut self, other: &PolicyGrad, scale: f64) {
        for (k, v) in &other.rows {
            self.add_row(*k, v, scale);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.rows.values_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn norm(&self) -> f64 {
        self.rows.values().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }

    pub fn get(&self, key: &RowKey) -> Option<&[f64]> {
        self.rows.get(key).map(Vec::as_slice)
    }
}

/// One sampled sequence with its recorded per-token log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt: PromptId,
    pub tokens: Vec<TokenId>,
    pub logprobs: Vec<f64>,
    pub step_distributions: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledGroup {
    pub prompt: PromptId,
    pub rollouts: Vec<Rollout>,
}

impl SampledGroup {
    pub fn total_tokens(&self) -> usize {
        self.rollouts.iter().map(|r| r.tokens.len()).sum()
    }
}

/// Numerically stable log-softmax of `logits / temperature`.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let lse = logits.iter().map(|&z| (z / temperature - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&z| z / temperature - lse).collect()
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    log_softmax(logits, temperature).into_iter().map(f64::exp).collect()
}

/// KL(p || q) from log-probabilities.
pub fn kl_from_logs(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter()
        .zip(logq)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum::<f64>()
        .max(0.0)
}

/// KL(p || q) between explicit probability vectors.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| if pi == 0.0 { 0.0 } else { pi * (pi / qi).ln() })
        .sum()
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u just above the cumulative sum.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl PolicyParams {
    pub fn uniform(config: PolicyConfig) -> Result<Self, PolicyError> {
        config.validate()?;
        Ok(Self {
            config,
            rows: RowTable::new(),
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn rows(&self) -> &RowTable {
        &self.rows
    }

    pub fn set_temperature(&mut self, t: f64) -> Result<(), PolicyError> {
        let mut cfg = self.config.clone();
        cfg.temperature = t;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    /// Context key for predicting the token at position `context.len()`.
    pub fn row_key(&self, prompt: PromptId, context: &[TokenId]) -> RowKey {
        let pos = context.len();
        let max_bucket = (self.config.max_len.saturating_sub(1)) / self.config.bucket_width;
        RowKey {
            prompt: prompt.0,
            prev: context.last().map_or(BOS, |t| t.0),
            bucket: (pos / self.config.bucket_width).min(max_bucket) as u32,
        }
    }

    pub fn logits(&self, key: &RowKey) -> Vec<f64> {
        self.rows
            .get(key)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.config.vocab_size])
    }

    /// Mutable logits for a row, materializing it at zero if absent.
    pub fn row_mut(&mut self, key: RowKey) -> &mut Vec<f64> {
        let v = self.config.vocab_size;
        self.rows.entry(key).or_insert_with(|| vec![0.0; v])
    }

    pub fn log_probs_at(&self, key: &RowKey) -> Vec<f64> {
        match self.rows.get(key) {
            Some(z) => log_softmax(z, self.config.temperature),
            None => vec![-(self.config.vocab_size as f64).ln(); self.config.vocab_size],
        }
    }

    pub fn probs_at(&self, key: &RowKey) -> Vec<f64> {
        self.log_probs_at(key).into_iter().map(f64::exp).collect()
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), PolicyError> {
        match tokens.iter().position(|t| t.index() >= self.config.vocab_size) {
            Some(pos) => Err(PolicyError::UnknownToken {
                pos,
                id: tokens[pos].0,
                vocab: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    pub fn conditional_distribution(&self, prompt: PromptId, context: &[TokenId]) -> Result<Vec<f64>, PolicyError> {
        self.check_tokens(context)?;
        Ok(self.probs_at(&self.row_key(prompt, context)))
    }

    /// Teacher-forced context keys for every position of `tokens`.
    pub fn context_keys(&self, prompt: PromptId, tokens: &[TokenId]) -> Vec<RowKey> {
        (0..tokens.len()).map(|j| self.row_key(prompt, &tokens[..j])).collect()
    }

    pub fn token_logprobs(&self, prompt: PromptId, tokens: &[TokenId]) -> Result<Vec<f64>, PolicyError> {
        self.check_tokens(tokens)?;
        Ok(self
            .context_keys(prompt, tokens)
            .iter()
            .zip(tokens)
            .map(|(k, t)| self.log_probs_at(k)[t.index()])
            .collect())
    }

    pub fn sequence_logprob(&self, prompt: PromptId, tokens: &[TokenId]) -> Result<f64, PolicyError> {
        Ok(self.token_logprobs(prompt, tokens)?.iter().sum())
    }

    /// Gradient of `sequence_logprob` with respect to the logit table.
    pub fn logprob_gradient(&self, prompt: PromptId, tokens: &[TokenId]) -> Result<PolicyGrad, PolicyError> {
        self.check_tokens(tokens)?;
        let inv_t = 1.0 / self.config.temperature;
        let mut grad = PolicyGrad::default();
        for (key, tok) in self.context_keys(prompt, tokens).into_iter().zip(tokens) {
            let mut g: Vec<f64> = self.probs_at(&key).into_iter().map(|p| -p * inv_t).collect();
            g[tok.index()] += inv_t;
            grad.add_row(key, &g, 1.0);
        }
        Ok(grad)
    }

    /// Ancestral sampling of one sequence from an explicit RNG.
    pub fn sample_with<R: Rng>(
        &self,
        prompt: PromptId,
        max_len: usize,
        keep_distributions: bool,
        rng: &mut R,
    ) -> Rollout {
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        let mut dists = keep_distributions.then(Vec::new);
        while tokens.len() < max_len {
            let key = self.row_key(prompt, &tokens);
            let logp = self.log_probs_at(&key);
            let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
            let i = sample_index(&probs, rng.random::<f64>());
            let tok = TokenId(i as u32);
            tokens.push(tok);
            logprobs.push(logp[i]);
            if let Some(d) = dists.as_mut() {
                d.push(probs);
            }
            if Some(tok) == self.config.end_token {
                break;
            }
        }
        Rollout {
            prompt,
            tokens,
            logprobs,
            step_distributions: dists,
        }
    }

    /// Samples `n` rollouts in parallel. Rollout `i` draws from a stream
    /// derived from `(seed, i)`, so the result does not depend on scheduling.
    pub fn sample_group(&self, prompt: PromptId, n: usize, max_len: usize, seed: u64) -> SampledGroup {
        let rollouts = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut r = rng::stream(seed, "policy/rollout", i as u64);
                self.sample_with(prompt, max_len, false, &mut r)
            })
            .collect();
        SampledGroup { prompt, rollouts }
    }

    pub fn greedy_decode(&self, prompt: PromptId, max_len: usize) -> Vec<TokenId> {
        let mut tokens = Vec::new();
        while tokens.len() < max_len {
            let key = self.row_key(prompt, &tokens);
            let logits = self.logits(&key);
            // First maximum wins, so ties are deterministic.
            let (i, _) = logits.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |best, (i, &z)| if z > best.1 { (i, z) } else { best },
            );
            let tok = TokenId(i as u32);
            tokens.push(tok);
            if Some(tok) == self.config.end_token {
                break;
            }
        }
        tokens
    }

    /// `params += scale * grad`.
    pub fn apply(&mut self, grad: &PolicyGrad, scale: f64) {
        for (k, g) in &grad.rows {
            let row = self.row_mut(*k);
            row.iter_mut().zip(g).for_each(|(z, d)| *z += scale * d);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rows.values().flatten().all(|x| x.is_finite())
    }

    pub fn save(&self, path: &Path, vocab_fingerprint: &str) -> Result<(), PolicyError> {
        let ckpt = PolicyCheckpoint {
            format_version: CHECKPOINT_VERSION,
            vocab_fingerprint: vocab_fingerprint.to_string(),
            config: self.config.clone(),
            rows: self.rows.iter().map(|(k, v)| (*k, v.clone())).collect(),
        };
        fs::write(path, serde_json::to_vec(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &Path, vocab_fingerprint: &str) -> Result<Self, PolicyError> {
        let ckpt: PolicyCheckpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(PolicyError::UnsupportedVersion(ckpt.format_version));
        }
        if ckpt.vocab_fingerprint != vocab_fingerprint {
            return Err(PolicyError::VocabMismatch {
                expected: vocab_fingerprint.to_string(),
                found: ckpt.vocab_fingerprint,
            });
        }
        ckpt.config.validate()?;
        if ckpt.rows.iter().any(|(_, v)| v.len() != ckpt.config.vocab_size) {
            return Err(PolicyError::BadConfig("row width differs from vocab size".into()));
        }
        Ok(Self {
            config: ckpt.config,
            rows: ckpt.rows.into_iter().collect(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyCheckpoint {
    format_version: u32,
    vocab_fingerprint: String,
    config: PolicyConfig,
    rows: Vec<(RowKey, Vec<f64>)>,
}

/// Exact KL(policy || reference) of the next-token distributions at `context`.
pub fn exact_kl(policy: &PolicyParams, reference: &PolicyParams, prompt: PromptId, context: &[TokenId]) -> f64 {
    let key = policy.row_key(prompt, context);
    kl_from_logs(&policy.log_probs_at(&key), &reference.log_probs_at(&key))
}

/// Gradient of KL(softmax(z/T) || ref) with respect to the logits `z`.
pub fn kl_logit_gradient(logp: &[f64], logq: &[f64], temperature: f64) -> Vec<f64> {
    let kl = kl_from_logs(logp, logq);
    logp.iter()
        .zip(logq)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            p * ((lp - lq) - kl) / temperature
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform(v: usize) -> PolicyParams {
        PolicyParams::uniform(PolicyConfig::new(v)).unwrap()
    }

    #[test]
    fn uniform_init_is_uniform() {
        let p = uniform(7);
        let d = p
            .conditional_distribution(PromptId(3), &[TokenId(1), TokenId(5)])
            .unwrap();
        assert!(d.iter().all(|x| (x - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn large_temperature_flattens() {
        let mut p = uniform(10);
        let key = p.row_key(PromptId(0), &[]);
        p.row_mut(key)
            .iter_mut()
            .enumerate()
            .for_each(|(i, z)| *z = if i % 2 == 0 { 10.0 } else { -10.0 });
        p.set_temperature(1e6).unwrap();
        let d = p.conditional_distribution(PromptId(0), &[]).unwrap();
        assert!(d.iter().all(|x| (x - 0.1).abs() < 1e-3));
    }

    #[test]
    fn single_spike_probability() {
        let v = 12;
        let mut p = uniform(v);
        let key = p.row_key(PromptId(0), &[]);
        p.row_mut(key)[4] = 10.0;
        let d = p.conditional_distribution(PromptId(0), &[]).unwrap();
        let expected = 10f64.exp() / (10f64.exp() + (v as f64 - 1.0));
        assert!((d[4] - expected).abs() < 1e-14);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_tokens_are_rejected() {
        let p = uniform(5);
        assert!(matches!(
            p.sequence_logprob(PromptId(0), &[TokenId(1), TokenId(5)]),
            Err(PolicyError::UnknownToken { pos: 1, id: 5, .. })
        ));
        assert!(p.conditional_distribution(PromptId(0), &[TokenId(9)]).is_err());
    }

    #[test]
    fn uniform_sequence_logprob_closed_form() {
        let p = uniform(10);
        let toks: Vec<TokenId> = (0..6).map(TokenId).collect();
        let lp = p.sequence_logprob(PromptId(0), &toks).unwrap();
        assert!((lp + 6.0 * 10f64.ln()).abs() < 1e-12);
        assert_eq!(p.sequence_logprob(PromptId(0), &[]).unwrap(), 0.0);
    }

    #[test]
    fn sampled_logprobs_match_recomputation() {
        let mut p = uniform(9);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for key_pos in 0..6 {
            let key = p.row_key(PromptId(2), &vec![TokenId(3); key_pos]);
            p.row_mut(key).iter_mut().for_each(|z| *z = r.random_range(-2.0..2.0));
        }
        let g = p.sample_group(PromptId(2), 6, 10, 99);
        for ro in &g.rollouts {
            let recorded: f64 = ro.logprobs.iter().sum();
            let recomputed = p.sequence_logprob(PromptId(2), &ro.tokens).unwrap();
            assert!((recorded - recomputed).abs() < 1e-9);
            assert!(ro.logprobs.iter().all(|&l| l <= 0.0));
        }
    }

    #[test]
    fn group_sampling_is_seeded() {
        let p = uniform(11);
        let a = p.sample_group(PromptId(0), 4, 12, 5);
        assert_eq!(a, p.sample_group(PromptId(0), 4, 12, 5));
        assert_ne!(a, p.sample_group(PromptId(0), 4, 12, 6));
        assert!(a.rollouts.iter().all(|r| r.tokens.len() == 12));
        // Serial sampling from the same derived streams agrees.
        for (i, ro) in a.rollouts.iter().enumerate() {
            let mut r = rng::stream(5, "policy/rollout", i as u64);
            assert_eq!(&p.sample_with(PromptId(0), 12, false, &mut r), ro);
        }
    }

    #[test]
    fn degenerate_policy_repeats_token() {
        let v = 6;
        let mut cfg = PolicyConfig::new(v);
        cfg.max_len = 8;
        let mut p = PolicyParams::uniform(cfg).unwrap();
        let tau = TokenId(2);
        for len in 0..8 {
            let key = p.row_key(PromptId(0), &vec![tau; len]);
            p.row_mut(key)[tau.index()] = 1e4;
        }
        for ro in p.sample_group(PromptId(0), 5, 8, 3).rollouts {
            assert_eq!(ro.tokens, vec![tau; 8]);
        }
        // With tau as the end token every rollout stops immediately.
        let mut cfg = p.config().clone();
        cfg.end_token = Some(tau);
        let p = PolicyParams {
            config: cfg,
            rows: p.rows.clone(),
        };
        for ro in p.sample_group(PromptId(0), 5, 8, 3).rollouts {
            assert_eq!(ro.tokens, vec![tau]);
        }
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let p = uniform(10);
        let groups = 10_000;
        let mut counts = [0usize; 10];
        for g in 0..groups {
            for ro in p.sample_group(PromptId(0), 8, 1, g as u64).rollouts {
                counts[ro.tokens[0].index()] += 1;
            }
        }
        let n = (groups * 8) as f64;
        let sigma = (n * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - n * 0.1).abs() < 3.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn kl_worked_example() {
        let kl = kl_categorical(&[0.9, 0.1], &[0.5, 0.5]);
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.3681).abs() < 1e-4);
        let logs = |p: &[f64]| p.iter().map(|x| x.ln()).collect::<Vec<_>>();
        assert!((kl_from_logs(&logs(&[0.9, 0.1]), &logs(&[0.5, 0.5])) - expected).abs() < 1e-15);
    }

    #[test]
    fn exact_kl_of_identical_policies_is_zero() {
        let mut p = uniform(5);
        let key = p.row_key(PromptId(1), &[TokenId(0)]);
        p.row_mut(key).copy_from_slice(&[1.0, -1.0, 0.5, 2.0, 0.0]);
        assert_eq!(exact_kl(&p, &p, PromptId(1), &[TokenId(0)]), 0.0);
        assert!(exact_kl(&p, &uniform(5), PromptId(1), &[TokenId(0)]) > 0.0);
    }

    #[test]
    fn single_step_gradient_is_onehot_minus_softmax() {
        let mut p = uniform(4);
        let key = p.row_key(PromptId(0), &[]);
        p.row_mut(key).copy_from_slice(&[0.3, -0.2, 1.0, 0.0]);
        let g = p.logprob_gradient(PromptId(0), &[TokenId(2)]).unwrap();
        let probs = softmax(&[0.3, -0.2, 1.0, 0.0], 1.0);
        let row = g.get(&key).unwrap();
        for i in 0..4 {
            let want = if i == 2 { 1.0 } else { 0.0 } - probs[i];
            assert!((row[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_gradient_sums_to_zero_over_choices() {
        let p = uniform(6);
        let mut total = PolicyGrad::default();
        for k in 0..6 {
            total.merge(&p.logprob_gradient(PromptId(0), &[TokenId(k)]).unwrap(), 1.0);
        }
        assert!(total.norm() < 1e-14);
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let mut p = uniform(5);
        let key = p.row_key(PromptId(0), &[]);
        p.row_mut(key)[1] = 0.25;
        p.save(&path, "abc").unwrap();
        assert_eq!(PolicyParams::load(&path, "abc").unwrap(), p);
        assert!(matches!(
            PolicyParams::load(&path, "xyz"),
            Err(PolicyError::VocabMismatch { .. })
        ));
    }
}
