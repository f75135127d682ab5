//! Cold-start supervised fine-tuning: maximize the likelihood of
//! ground-truth plans given their prompt.
//!
//! The loss is the mean over examples of the per-sequence negative
//! log-likelihood. Steps are plain gradient descent with a backtracking
//! learning rate: a step that raises the batch loss is rejected and retried
//! at half the rate; an accepted step grows the rate by `lr_growth`.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{format_reward, parse_action_plan, ParseError, TokenId, Vocabulary};
use crate::policy::{PolicyError, PolicyGrad, PolicyParams};
use crate::rng;
use crate::PromptId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub prompt: PromptId,
    pub target: Vec<TokenId>,
}

#[derive(Debug, Error)]
pub enum SftError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("example {index} has an invalid target plan: {error}")]
    InvalidTarget { index: usize, error: ParseError },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub fn validate_examples(batch: &[SftExample], vocab: &Vocabulary) -> Result<(), SftError> {
    if batch.is_empty() {
        return Err(SftError::EmptyBatch);
    }
    for (index, ex) in batch.iter().enumerate() {
        parse_action_plan(&ex.target, vocab).map_err(|error| SftError::InvalidTarget { index, error })?;
    }
    Ok(())
}

fn mean_nll(params: &PolicyParams, batch: &[SftExample]) -> Result<f64, PolicyError> {
    let total = batch
        .par_iter()
        .map(|ex| params.sequence_logprob(ex.prompt, &ex.target))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .sum::<f64>();
    Ok(-total / batch.len() as f64)
}

/// Mean per-example negative log-likelihood of the targets.
pub fn sft_loss(params: &PolicyParams, batch: &[SftExample], vocab: &Vocabulary) -> Result<f64, SftError> {
    validate_examples(batch, vocab)?;
    Ok(mean_nll(params, batch)?)
}

/// Gradient of the mean NLL. Per-example gradients are reduced in batch order.
pub fn sft_gradient(params: &PolicyParams, batch: &[SftExample]) -> Result<PolicyGrad, PolicyError> {
    let parts = batch
        .par_iter()
        .map(|ex| params.logprob_gradient(ex.prompt, &ex.target))
        .collect::<Result<Vec<_>, _>>()?;
    let mut grad = PolicyGrad::default();
    let scale = -1.0 / batch.len() as f64;
    for g in &parts {
        grad.merge(g, scale);
    }
    Ok(grad)
}

/// One plain gradient-descent step at a fixed learning rate.
pub fn sft_step(
    params: &PolicyParams,
    batch: &[SftExample],
    lr: f64,
    vocab: &Vocabulary,
) -> Result<PolicyParams, SftError> {
    validate_examples(batch, vocab)?;
    let grad = sft_gradient(params, batch)?;
    let mut next = params.clone();
    if lr != 0.0 {
        next.apply(&grad, -lr);
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss_before: f64,
    pub loss_after: f64,
    /// Rate of the accepted step, or 0 when every trial was rejected.
    pub lr_used: f64,
    pub rejections: u32,
}

/// Backtracking step: halves `lr` until the batch loss does not increase.
/// Returns the outcome and the rate to use next.
pub fn backtracking_step(
    params: &mut PolicyParams,
    batch: &[SftExample],
    lr: f64,
    cfg: &SftConfig,
) -> Result<(StepOutcome, f64), SftError> {
    let loss_before = mean_nll(params, batch)?;
    let grad = sft_gradient(params, batch)?;
    let mut lr = lr;
    let mut rejections = 0;
    while lr >= cfg.min_lr {
        let mut trial = params.clone();
        trial.apply(&grad, -lr);
        let loss_after = mean_nll(&trial, batch)?;
        if loss_after <= loss_before && trial.is_finite() {
            *params = trial;
            let next = (lr * cfg.lr_growth).min(cfg.max_lr);
            return Ok((
                StepOutcome {
                    loss_before,
                    loss_after,
                    lr_used: lr,
                    rejections,
                },
                next,
            ));
        }
        lr *= 0.5;
        rejections += 1;
    }
    Ok((
        StepOutcome {
            loss_before,
            loss_after: loss_before,
            lr_used: 0.0,
            rejections,
        },
        cfg.min_lr,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied to the rate after an accepted step (1.0 disables).
    pub lr_growth: f64,
    pub max_lr: f64,
    pub min_lr: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            lr: 0.5,
            lr_growth: 1.1,
            max_lr: 30.0,
            min_lr: 1e-10,
            eval_every: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftMetricsRow {
    pub step: usize,
    /// Mean over examples of the per-sequence NLL on this step's batch.
    pub loss_mean_seq_nll: f64,
    pub lr: f64,
    /// Fraction of evaluation prompts whose greedy decode is a valid plan.
    pub format_validity: Option<f64>,
}

/// Fraction of prompts whose greedy decode parses as a valid plan.
pub fn greedy_validity_rate(params: &PolicyParams, prompts: &[PromptId], vocab: &Vocabulary) -> f64 {
    if prompts.is_empty() {
        return 0.0;
    }
    let max_len = params.config().max_len;
    let ok: usize = prompts
        .iter()
        .map(|&p| usize::from(format_reward(&params.greedy_decode(p, max_len), vocab)))
        .sum();
    ok as f64 / prompts.len() as f64
}

/// Runs `cfg.steps` backtracking steps over seeded per-epoch shuffles.
pub fn train_sft(
    params: &mut PolicyParams,
    examples: &[SftExample],
    vocab: &Vocabulary,
    cfg: &SftConfig,
    eval_prompts: &[PromptId],
) -> Result<Vec<SftMetricsRow>, SftError> {
    validate_examples(examples, vocab)?;
    let batch_size = cfg.batch_size.clamp(1, examples.len());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    let mut lr = cfg.lr;
    let mut rows = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        if cursor + batch_size > order.len() {
            order = (0..examples.len()).collect();
            order.shuffle(&mut rng::stream(cfg.seed, "sft/epoch", epoch));
            epoch += 1;
            cursor = 0;
        }
        let batch: Vec<SftExample> = order[cursor..cursor + batch_size]
            .iter()
            .map(|&i| examples[i].clone())
            .collect();
        cursor += batch_size;

        let (outcome, next_lr) = backtracking_step(params, &batch, lr, cfg)?;
        lr = next_lr;
        let eval = cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps);
        rows.push(SftMetricsRow {
            step,
            loss_mean_seq_nll: outcome.loss_after,
            lr: outcome.lr_used,
            format_validity: eval.then(|| greedy_validity_rate(params, eval_prompts, vocab)),
        });
    }
    Ok(rows)
}
