//! Two-stage inference (plan, then edit) and pairwise evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{sample_ode, ConditionEncoder, FlowError, VelocityNet};
use crate::grammar::{format_reward, parse_action_plan, shuffle_dimensions, TokenId, Vocabulary};
use crate::policy::PolicyParams;
use crate::reward::{normalized_expected, ScoreDistribution};
use crate::rng;
use crate::stats::{bootstrap_mean_ci, mean};
use crate::world::l2;
use crate::PromptId;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {outputs} outputs vs {references} references")]
    LengthMismatch { outputs: usize, references: usize },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("human study file: {0}")]
    HumanStudy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Candidate,
    Reference,
}

/// What a judge knows about an evaluation item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalContext {
    pub prompt: PromptId,
    /// Planted aesthetic optimum for the prompt.
    pub target: Vec<f64>,
}

pub trait JudgeOracle: Sync {
    fn name(&self) -> &str;
    fn compare(&self, ctx: &EvalContext, candidate: &[f64], reference: &[f64]) -> Verdict;
    fn score(&self, ctx: &EvalContext, candidate: &[f64]) -> ScoreDistribution;
}

/// Prefers the latent closer to the target; ties go to the reference.
/// Scores map distance `δ` to a distribution centered at `5·exp(−δ²/2σ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceJudge {
    pub name: String,
    pub sigma: f64,
}

impl DistanceJudge {
    pub fn new(name: &str, sigma: f64) -> Self {
        Self {
            name: name.to_string(),
            sigma,
        }
    }

    /// The three scorer slots reported next to the win rates.
    pub fn scorer_panel() -> Vec<DistanceJudge> {
        vec![
            DistanceJudge::new("scorer_sharp", 1.0),
            DistanceJudge::new("scorer_mid", 2.0),
            DistanceJudge::new("scorer_broad", 4.0),
        ]
    }
}

impl JudgeOracle for DistanceJudge {
    fn name(&self) -> &str {
        &self.name
    }

    fn compare(&self, ctx: &EvalContext, candidate: &[f64], reference: &[f64]) -> Verdict {
        if l2(candidate, &ctx.target) < l2(reference, &ctx.target) {
            Verdict::Candidate
        } else {
            Verdict::Reference
        }
    }

    fn score(&self, ctx: &EvalContext, candidate: &[f64]) -> ScoreDistribution {
        let d = l2(candidate, &ctx.target);
        ScoreDistribution::standard_hat(5.0 * (-d * d / (2.0 * self.sigma * self.sigma)).exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutput {
    pub prompt: PromptId,
    pub plan: Vec<TokenId>,
    pub plan_valid: bool,
    pub latent: Vec<f64>,
}

/// Greedy plan, optional dimension shuffle, then one ODE sample conditioned
/// on the (possibly invalid) plan tokens.
#[allow(clippy::too_many_arguments)]
pub fn run_inference(
    policy: &PolicyParams,
    editor: &VelocityNet,
    encoder: &ConditionEncoder,
    vocab: &Vocabulary,
    prompt: PromptId,
    ode_steps: usize,
    seed: u64,
    shuffle: bool,
) -> Result<InferenceOutput, EvalError> {
    let mut plan = policy.greedy_decode(prompt, policy.config().max_len);
    let plan_valid = format_reward(&plan, vocab) == 1;
    if shuffle {
        if let Ok(parsed) = parse_action_plan(&plan, vocab) {
            plan = shuffle_dimensions(
                &parsed,
                vocab,
                rng::derive_seed(seed, "eval/shuffle", u64::from(prompt.0)),
            );
        }
    }
    let h = encoder.encode(prompt, &plan, vocab);
    let mut r = rng::stream(seed, "eval/ode", 0);
    let latent = sample_ode(editor, &h, ode_steps, &mut r)?;
    Ok(InferenceOutput {
        prompt,
        plan,
        plan_valid,
        latent,
    })
}

/// Per-comparison win indicators (1 when the judge prefers the output).
pub fn win_indicators(
    contexts: &[EvalContext],
    outputs: &[Vec<f64>],
    references: &[Vec<f64>],
    judge: &dyn JudgeOracle,
) -> Result<Vec<f64>, EvalError> {
    if outputs.len() != references.len() || outputs.len() != contexts.len() {
        return Err(EvalError::LengthMismatch {
            outputs: outputs.len(),
            references: references.len(),
        });
    }
    Ok(contexts
        .par_iter()
        .zip(outputs)
        .zip(references)
        .map(|((c, o), r)| f64::from(u8::from(judge.compare(c, o, r) == Verdict::Candidate)))
        .collect())
}

pub fn pairwise_win_rate(
    contexts: &[EvalContext],
    outputs: &[Vec<f64>],
    references: &[Vec<f64>],
    judge: &dyn JudgeOracle,
) -> Result<f64, EvalError> {
    let wins = win_indicators(contexts, outputs, references, judge)?;
    Ok(if wins.is_empty() { 0.0 } else { mean(&wins) })
}

/// Mean normalized expected score per scorer; `None` for an empty set.
pub fn aggregate_scores(
    contexts: &[EvalContext],
    outputs: &[Vec<f64>],
    scorers: &[&dyn JudgeOracle],
) -> BTreeMap<String, Option<f64>> {
    scorers
        .iter()
        .map(|s| {
            let vals: Vec<f64> = contexts
                .iter()
                .zip(outputs)
                .map(|(c, o)| normalized_expected(&s.score(c, o)).unwrap_or(0.0))
                .collect();
            (s.name().to_string(), (!vals.is_empty()).then(|| mean(&vals)))
        })
        .collect()
}

/// A held-out pair seen from the evaluator's side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub context: EvalContext,
    pub poor: Vec<f64>,
    pub good: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub max_items: usize,
    pub ode_steps: usize,
    pub seed: u64,
    pub bootstrap_resamples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_items: 200,
            ode_steps: 50,
            seed: 0,
            bootstrap_resamples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub samples: usize,
    pub empty: bool,
    pub win_rate_vs_poor: f64,
    pub win_rate_vs_good: f64,
    pub ci95_vs_poor: (f64, f64),
    pub ci95_vs_good: (f64, f64),
    pub format_validity: f64,
    pub scorer_means: BTreeMap<String, Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_preference: Option<f64>,
}

/// Runs inference on up to `cfg.max_items` items and judges the outputs.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    label: &str,
    items: &[EvalItem],
    policy: &PolicyParams,
    editor: &VelocityNet,
    encoder: &ConditionEncoder,
    vocab: &Vocabulary,
    judge: &dyn JudgeOracle,
    scorers: &[&dyn JudgeOracle],
    cfg: &EvalConfig,
    shuffle: bool,
) -> Result<(EvalReport, Vec<InferenceOutput>), EvalError> {
    let items = &items[..items.len().min(cfg.max_items)];
    let outputs = items
        .par_iter()
        .enumerate()
        .map(|(i, it)| {
            let seed = rng::derive_seed(cfg.seed, "eval/item", i as u64);
            run_inference(
                policy,
                editor,
                encoder,
                vocab,
                it.context.prompt,
                cfg.ode_steps,
                seed,
                shuffle,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let contexts: Vec<EvalContext> = items.iter().map(|i| i.context.clone()).collect();
    let latents: Vec<Vec<f64>> = outputs.iter().map(|o| o.latent.clone()).collect();
    let poor: Vec<Vec<f64>> = items.iter().map(|i| i.poor.clone()).collect();
    let good: Vec<Vec<f64>> = items.iter().map(|i| i.good.clone()).collect();
    let vs_poor = win_indicators(&contexts, &latents, &poor, judge)?;
    let vs_good = win_indicators(&contexts, &latents, &good, judge)?;
    let rate = |w: &[f64]| if w.is_empty() { 0.0 } else { mean(w) };
    let ci = |w: &[f64], tag: u64| {
        if w.is_empty() {
            (0.0, 0.0)
        } else {
            bootstrap_mean_ci(
                w,
                cfg.bootstrap_resamples,
                0.05,
                rng::derive_seed(cfg.seed, "eval/ci", tag),
            )
        }
    };
    let validity: Vec<f64> = outputs.iter().map(|o| f64::from(u8::from(o.plan_valid))).collect();
    let report = EvalReport {
        label: label.to_string(),
        samples: items.len(),
        empty: items.is_empty(),
        win_rate_vs_poor: rate(&vs_poor),
        win_rate_vs_good: rate(&vs_good),
        ci95_vs_poor: ci(&vs_poor, 0),
        ci95_vs_good: ci(&vs_good, 1),
        format_validity: rate(&validity),
        scorer_means: aggregate_scores(&contexts, &latents, scorers),
        human_preference: None,
    };
    Ok((report, outputs))
}

#[derive(Debug, Deserialize)]
struct HumanRow {
    method: String,
    human_preference: f64,
}

/// Fills `human_preference` from a `method,human_preference` CSV.
pub fn attach_human_study(reports: &mut [EvalReport], path: &Path) -> Result<(), EvalError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| EvalError::HumanStudy(e.to_string()))?;
    let mut by_method = BTreeMap::new();
    for row in rdr.deserialize::<HumanRow>() {
        let row = row.map_err(|e| EvalError::HumanStudy(e.to_string()))?;
        by_method.insert(row.method, row.human_preference);
    }
    for r in reports {
        r.human_preference = by_method.get(&r.label).copied();
    }
    Ok(())
}

/// One row per report: method, both win rates, the scorer columns and the
/// human-study column.
pub fn write_table_csv(reports: &[EvalReport], path: &Path) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    let scorer_names: Vec<String> = reports
        .first()
        .map(|r| r.scorer_means.keys().cloned().collect())
        .unwrap_or_default();
    let mut header = vec!["method".to_string(), "win_vs_poor".into(), "win_vs_good".into()];
    header.extend(scorer_names.iter().cloned());
    header.push("human_preference".into());
    w.write_record(&header)?;
    let fmt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_default();
    for r in reports {
        let mut row = vec![
            r.label.clone(),
            format!("{:.4}", r.win_rate_vs_poor),
            format!("{:.4}", r.win_rate_vs_good),
        ];
        row.extend(
            scorer_names
                .iter()
                .map(|n| fmt(r.scorer_means.get(n).copied().flatten())),
        );
        row.push(fmt(r.human_preference));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
