//! Fully on-policy group relative policy optimization.
//!
//! Each step samples a group of rollouts for one prompt, scores them, turns
//! the rewards into group-standardized advantages and takes one ascent step
//! on the token-averaged objective
//!
//! ```text
//! J = 1/Σ|a_i| · Σ_i Σ_j ( A_i · log π(a_ij | ·) − β · KL(π ‖ π_ref)(· at j) )
//! ```
//!
//! The KL term is exact: both policies expose full next-token distributions.
//! A group is used for exactly one update.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{ActionPlan, Vocabulary};
use crate::policy::{kl_from_logs, kl_logit_gradient, PolicyError, PolicyGrad, PolicyParams, SampledGroup};
use crate::reward::{score_batch, OracleError, RewardBreakdown, RewardOracle, RewardWeights};
use crate::rng;
use crate::PromptId;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group size {0} is too small (need at least 2)")]
    GroupTooSmall(usize),
    #[error("invalid GRPO config: {0}")]
    BadConfig(String),
    #[error("no prompts to train on")]
    NoPrompts,
    #[error("rollout {index} logprobs drifted from the sampling policy by {drift:e}")]
    OffPolicy { index: usize, drift: f64 },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub beta: f64,
    pub lr: f64,
    pub steps: usize,
    pub std_epsilon: f64,
    pub seed: u64,
    /// Global L2 cap on each update's gradient; 0 disables clipping.
    pub max_grad_norm: f64,
    pub max_len: usize,
    /// Concurrent oracle calls per group.
    pub parallelism: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            beta: 0.04,
            lr: 4.0,
            steps: 500,
            std_epsilon: 1e-6,
            seed: 0,
            max_grad_norm: 1.0,
            max_len: 64,
            parallelism: 8,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::GroupTooSmall(self.group_size));
        }
        let bad = |m: &str| Err(GrpoError::BadConfig(m.to_string()));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be a finite non-negative number");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.std_epsilon.is_nan() || self.std_epsilon <= 0.0 {
            return bad("std_epsilon must be positive");
        }
        if self.max_grad_norm.is_nan() || self.max_grad_norm < 0.0 {
            return bad("max_grad_norm must be non-negative");
        }
        if self.max_len == 0 {
            return bad("max_len must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet {
    /// One advantage per rollout; every token of rollout `i` shares `values[i]`.
    pub values: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of the rewards.
    pub std: f64,
}

impl AdvantageSet {
    pub fn token_advantage(&self, rollout: usize, _position: usize) -> f64 {
        self.values[rollout]
    }
}

pub fn compute_advantages(rewards: &[f64], std_epsilon: f64) -> Result<AdvantageSet, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let values = if rewards.iter().all(|&r| r == rewards[0]) {
        vec![0.0; rewards.len()]
    } else {
        let denom = std.max(std_epsilon);
        rewards.iter().map(|r| (r - mean) / denom).collect()
    };
    Ok(AdvantageSet { values, mean, std })
}

/// Exact per-token KL(π ‖ π_ref) at every decoding context of every rollout.
pub fn step_kls(group: &SampledGroup, params: &PolicyParams, reference: &PolicyParams) -> Vec<Vec<f64>> {
    group
        .rollouts
        .par_iter()
        .map(|r| {
            params
                .context_keys(group.prompt, &r.tokens)
                .iter()
                .map(|k| kl_from_logs(&params.log_probs_at(k), &reference.log_probs_at(k)))
                .collect()
        })
        .collect()
}

/// Token-weighted mean of `A_ij − β · KL_ij` over the group.
pub fn grpo_objective(
    group: &SampledGroup,
    advantages: &AdvantageSet,
    params: &PolicyParams,
    reference: &PolicyParams,
    beta: f64,
) -> f64 {
    let total = group.total_tokens();
    if total == 0 {
        return 0.0;
    }
    let kls = step_kls(group, params, reference);
    let mut sum = 0.0;
    for (i, row) in kls.iter().enumerate() {
        for (j, kl) in row.iter().enumerate() {
            sum += advantages.token_advantage(i, j) - beta * kl;
        }
    }
    sum / total as f64
}

/// Ascent direction of the objective: policy-gradient term minus β times
/// the KL gradient, both averaged over all tokens of the group.
pub fn objective_gradient(
    group: &SampledGroup,
    advantages: &AdvantageSet,
    params: &PolicyParams,
    reference: &PolicyParams,
    beta: f64,
) -> Result<PolicyGrad, GrpoError> {
    let total = group.total_tokens();
    let mut grad = PolicyGrad::default();
    if total == 0 {
        return Ok(grad);
    }
    let temperature = params.config().temperature;
    let parts = group
        .rollouts
        .par_iter()
        .enumerate()
        .map(|(i, r)| -> Result<PolicyGrad, PolicyError> {
            let a = advantages.values[i];
            let mut g = if a != 0.0 {
                let mut pg = params.logprob_gradient(group.prompt, &r.tokens)?;
                pg.scale(a);
                pg
            } else {
                PolicyGrad::default()
            };
            if beta != 0.0 {
                for key in params.context_keys(group.prompt, &r.tokens) {
                    let kg = kl_logit_gradient(&params.log_probs_at(&key), &reference.log_probs_at(&key), temperature);
                    g.add_row(key, &kg, -beta);
                }
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let scale = 1.0 / total as f64;
    for g in &parts {
        grad.merge(g, scale);
    }
    Ok(grad)
}

/// A training prompt and the ground-truth plan its rollouts are judged against.
#[derive(Debug, Clone, PartialEq)]
pub struct GrpoPrompt {
    pub prompt: PromptId,
    pub reference: ActionPlan,
}

/// Round-robin over the prompts, starting at an offset drawn from the seed.
pub fn schedule_index(seed: u64, num_prompts: usize, step: usize) -> usize {
    let offset = (rng::derive_seed(seed, "grpo/schedule", 0) % num_prompts as u64) as usize;
    (offset + step) % num_prompts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub prompt: PromptId,
    pub mean_reward: f64,
    pub reward_std: f64,
    pub format_rate: f64,
    pub mean_alignment: f64,
    pub mean_creativity: f64,
    /// Token-weighted mean exact KL(π ‖ π_ref) over the sampled contexts, before the update.
    pub mean_kl: f64,
    pub objective: f64,
    pub grad_norm: f64,
    pub mean_len: f64,
}

/// One on-policy iteration. `params` is left untouched on error.
#[allow(clippy::too_many_arguments)]
pub fn grpo_step(
    params: &PolicyParams,
    reference: &PolicyParams,
    prompt: &GrpoPrompt,
    step: usize,
    oracle: &dyn RewardOracle,
    weights: &RewardWeights,
    cfg: &GrpoConfig,
    vocab: &Vocabulary,
) -> Result<(PolicyParams, StepReport), GrpoError> {
    cfg.validate()?;
    let seed = rng::derive_seed(cfg.seed, "grpo/step", step as u64);
    let group = params.sample_group(prompt.prompt, cfg.group_size, cfg.max_len, seed);

    for (index, r) in group.rollouts.iter().enumerate() {
        let again = params.token_logprobs(group.prompt, &r.tokens)?;
        let drift = again
            .iter()
            .zip(&r.logprobs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if drift > 1e-9 {
            return Err(GrpoError::OffPolicy { index, drift });
        }
    }

    let candidates: Vec<_> = group.rollouts.iter().map(|r| r.tokens.clone()).collect();
    let scored: Vec<RewardBreakdown> = score_batch(
        &candidates,
        &prompt.reference,
        prompt.prompt,
        oracle,
        weights,
        vocab,
        cfg.parallelism,
    )?;
    let rewards: Vec<f64> = scored.iter().map(|b| b.combined).collect();
    let adv = compute_advantages(&rewards, cfg.std_epsilon)?;

    let kls = step_kls(&group, params, reference);
    let total = group.total_tokens().max(1) as f64;
    let kl_sum: f64 = kls.iter().flatten().sum();
    let adv_sum: f64 = group
        .rollouts
        .iter()
        .enumerate()
        .map(|(i, r)| adv.values[i] * r.tokens.len() as f64)
        .sum();

    let mut grad = objective_gradient(&group, &adv, params, reference, cfg.beta)?;
    let grad_norm = if cfg.max_grad_norm > 0.0 {
        grad.clip_norm(cfg.max_grad_norm)
    } else {
        grad.norm()
    };
    let mut next = params.clone();
    next.apply(&grad, cfg.lr);

    let n = scored.len() as f64;
    let mean = |f: &dyn Fn(&RewardBreakdown) -> f64| scored.iter().map(f).sum::<f64>() / n;
    let report = StepReport {
        step,
        prompt: prompt.prompt,
        mean_reward: adv.mean,
        reward_std: adv.std,
        format_rate: mean(&|b| f64::from(b.format)),
        mean_alignment: mean(&|b| b.alignment),
        mean_creativity: mean(&|b| b.creativity),
        mean_kl: kl_sum / total,
        objective: (adv_sum - cfg.beta * kl_sum) / total,
        grad_norm,
        mean_len: total / n,
    };
    Ok((next, report))
}

/// Runs `cfg.steps` iterations. On an oracle failure the error is returned
/// and `params` holds the result of the last completed step.
#[allow(clippy::too_many_arguments)]
pub fn train_grpo(
    params: &mut PolicyParams,
    reference: &PolicyParams,
    prompts: &[GrpoPrompt],
    oracle: &dyn RewardOracle,
    weights: &RewardWeights,
    cfg: &GrpoConfig,
    vocab: &Vocabulary,
    mut on_step: impl FnMut(&StepReport, &PolicyParams),
) -> Result<Vec<StepReport>, GrpoError> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(GrpoError::NoPrompts);
    }
    let mut reports = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let prompt = &prompts[schedule_index(cfg.seed, prompts.len(), step - 1)];
        let (next, report) = grpo_step(params, reference, prompt, step, oracle, weights, cfg, vocab)?;
        *params = next;
        on_step(&report, params);
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::TokenId;
    use crate::policy::{PolicyConfig, Rollout};
    use crate::reward::MockRewardOracle;
    use crate::world::{Lexicon, World, WorldConfig};

    #[test]
    fn advantage_examples() {
        let a = compute_advantages(&[1.0, 2.0, 3.0], 1e-6).unwrap();
        assert!((a.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let want = [-1.224744871391589, 0.0, 1.224744871391589];
        for (x, y) in a.values.iter().zip(want) {
            assert!((x - y).abs() < 1e-9);
        }
        assert_eq!(compute_advantages(&[0.7; 5], 1e-6).unwrap().values, vec![0.0; 5]);
        assert_eq!(compute_advantages(&[0.0, 1.0], 1e-6).unwrap().values, vec![-1.0, 1.0]);
        assert!(matches!(
            compute_advantages(&[1.0], 1e-6),
            Err(GrpoError::GroupTooSmall(1))
        ));
    }

    fn binary_setup() -> (PolicyParams, PolicyParams, SampledGroup) {
        let mut p = PolicyParams::uniform(PolicyConfig::new(2)).unwrap();
        let q = p.clone();
        let key = p.row_key(PromptId(0), &[]);
        // p = (0.9, 0.1) against q = (0.5, 0.5).
        p.row_mut(key)[0] = 9f64.ln();
        let group = SampledGroup {
            prompt: PromptId(0),
            rollouts: vec![Rollout {
                prompt: PromptId(0),
                tokens: vec![TokenId(0)],
                logprobs: vec![0.9f64.ln()],
                step_distributions: None,
            }],
        };
        (p, q, group)
    }

    #[test]
    fn objective_examples() {
        let (p, q, group) = binary_setup();
        let zero = AdvantageSet {
            values: vec![0.0],
            mean: 0.0,
            std: 0.0,
        };
        assert!((grpo_objective(&group, &zero, &p, &q, 1.0) + 0.3681).abs() < 1e-4);
        assert_eq!(grpo_objective(&group, &zero, &p, &q, 0.0), 0.0);
        assert_eq!(grpo_objective(&group, &zero, &p, &p, 5.0), 0.0);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let (p, q, group) = binary_setup();
        let adv = AdvantageSet {
            values: vec![0.7],
            mean: 0.0,
            std: 1.0,
        };
        let beta = 0.3;
        let g = objective_gradient(&group, &adv, &p, &q, beta).unwrap();
        let key = p.row_key(PromptId(0), &[]);
        // Surrogate whose gradient the update ascends: A·log π(a) − β·KL.
        let surrogate = |pp: &PolicyParams| {
            0.7 * pp.sequence_logprob(PromptId(0), &[TokenId(0)]).unwrap()
                - beta * kl_from_logs(&pp.log_probs_at(&key), &q.log_probs_at(&key))
        };
        for i in 0..2 {
            let h = 1e-6;
            let mut a = p.clone();
            a.row_mut(key)[i] += h;
            let mut b = p.clone();
            b.row_mut(key)[i] -= h;
            let fd = (surrogate(&a) - surrogate(&b)) / (2.0 * h);
            assert!((fd - g.get(&key).unwrap()[i]).abs() < 1e-8);
        }
    }

    fn world_setup() -> (World, PolicyParams, MockRewardOracle, GrpoPrompt) {
        let w = World::generate(Lexicon::default(), WorldConfig::default()).unwrap();
        let mut cfg = PolicyConfig::new(w.vocab.len());
        cfg.end_token = Some(w.vocab.end_token());
        let p = PolicyParams::uniform(cfg).unwrap();
        let oracle = MockRewardOracle::from_world(&w);
        let prof = &w.profiles()[0];
        let prompt = GrpoPrompt {
            prompt: prof.id,
            reference: prof.ideal_plan.clone(),
        };
        (w, p, oracle, prompt)
    }

    #[test]
    fn steps_are_deterministic() {
        let (w, p, oracle, prompt) = world_setup();
        let cfg = GrpoConfig {
            steps: 3,
            seed: 11,
            ..Default::default()
        };
        let run = || {
            let mut params = p.clone();
            let r = train_grpo(
                &mut params,
                &p,
                std::slice::from_ref(&prompt),
                &oracle,
                &RewardWeights::default(),
                &cfg,
                &w.vocab,
                |_, _| {},
            )
            .unwrap();
            (params, r)
        };
        assert_eq!(run(), run());
    }

    struct DownOracle;
    impl RewardOracle for DownOracle {
        fn alignment(
            &self,
            _: PromptId,
            _: &[TokenId],
            _: &ActionPlan,
        ) -> Result<crate::reward::ScoreDistribution, OracleError> {
            Err(OracleError::Unavailable("down".into()))
        }
        fn creativity(&self, _: PromptId, _: &[TokenId]) -> Result<crate::reward::ScoreDistribution, OracleError> {
            Err(OracleError::Unavailable("down".into()))
        }
    }

    #[test]
    fn oracle_failure_skips_update() {
        let (w, p, _, prompt) = world_setup();
        let mut params = p.clone();
        let err = train_grpo(
            &mut params,
            &p,
            &[prompt],
            &DownOracle,
            &RewardWeights::default(),
            &GrpoConfig::default(),
            &w.vocab,
            |_, _| {},
        );
        assert!(matches!(err, Err(GrpoError::Oracle(OracleError::Unavailable(_)))));
        assert_eq!(params, p);
    }

    #[test]
    fn schedule_is_round_robin() {
        let idx: Vec<usize> = (0..8).map(|s| schedule_index(5, 4, s)).collect();
        for w in idx.windows(2) {
            assert_eq!(w[1], (w[0] + 1) % 4);
        }
    }

    #[test]
    fn config_validation() {
        let bad = GrpoConfig {
            group_size: 1,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(GrpoError::GroupTooSmall(1))));
        let bad = GrpoConfig {
            std_epsilon: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
