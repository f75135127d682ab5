//! Action-conditioned rectified flow over small latent vectors.
//!
//! Data sits at `t = 1` and noise at `t = 0`: `x_t = t·x_0 + (1−t)·x_1` with
//! constant velocity `x_0 − x_1`. Sampling integrates from noise at `t = 0`
//! to the data estimate at `t = 1` with explicit Euler steps.

mod encoder;
mod net;

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{TokenId, Vocabulary};
use crate::rng;
use crate::PromptId;

pub use encoder::ConditionEncoder;
pub use net::{gaussian, Adam, Dense, NetConfig, NetGrad, VelocityNet};

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("time {0} is outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid editor config: {0}")]
    BadConfig(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Interpolated latent and its velocity target.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>), FlowError> {
    if x0.len() != x1.len() {
        return Err(FlowError::DimensionMismatch {
            expected: x0.len(),
            got: x1.len(),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::TimeOutOfRange(t));
    }
    let xt = x0.iter().zip(x1).map(|(a, b)| t * a + (1.0 - t) * b).collect();
    let vt = x0.iter().zip(x1).map(|(a, b)| a - b).collect();
    Ok((xt, vt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
    pub xt: Vec<f64>,
    pub vt: Vec<f64>,
    pub h: Vec<f64>,
}

impl FlowSample {
    pub fn new(x0: Vec<f64>, x1: Vec<f64>, t: f64, h: Vec<f64>) -> Result<Self, FlowError> {
        let (xt, vt) = interpolate(&x0, &x1, t)?;
        Ok(Self { x0, x1, t, xt, vt, h })
    }
}

pub type FlowBatch = Vec<FlowSample>;

/// Mean over the batch of `‖v(x_t, t, h) − v_t‖²`.
pub fn fm_loss(net: &VelocityNet, batch: &[FlowSample]) -> Result<f64, FlowError> {
    if batch.is_empty() {
        return Err(FlowError::EmptyBatch);
    }
    let errs = batch
        .par_iter()
        .map(|s| {
            let v = net.forward(&s.xt, s.t, &s.h)?;
            Ok(v.iter().zip(&s.vt).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        })
        .collect::<Result<Vec<f64>, FlowError>>()?;
    Ok(errs.iter().sum::<f64>() / batch.len() as f64)
}

/// Loss and analytic gradient; per-sample gradients are reduced in batch order.
pub fn fm_loss_grad(net: &VelocityNet, batch: &[FlowSample]) -> Result<(f64, NetGrad), FlowError> {
    if batch.is_empty() {
        return Err(FlowError::EmptyBatch);
    }
    let parts = batch
        .par_iter()
        .map(|s| net.sq_error_grad(&s.xt, s.t, &s.h, &s.vt))
        .collect::<Result<Vec<_>, _>>()?;
    let n = batch.len() as f64;
    let mut grad = NetGrad::zeros_like(net);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        grad.add_scaled(g, 1.0 / n);
    }
    Ok((loss / n, grad))
}

/// A training triple with its conditioning precomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditorExample {
    pub prompt: PromptId,
    pub plan: Vec<TokenId>,
    pub x0: Vec<f64>,
    pub h: Vec<f64>,
}

impl EditorExample {
    pub fn new(prompt: PromptId, plan: Vec<TokenId>, x0: Vec<f64>, enc: &ConditionEncoder, vocab: &Vocabulary) -> Self {
        let h = enc.encode(prompt, &plan, vocab);
        Self { prompt, plan, x0, h }
    }
}

/// Draws `batch_size` samples: examples without replacement when the dataset
/// is larger than the batch, otherwise every example cycled in order. Each
/// sample gets fresh noise and time.
pub fn build_batch<R: Rng>(data: &[EditorExample], batch_size: usize, rng: &mut R) -> Result<FlowBatch, FlowError> {
    if data.is_empty() || batch_size == 0 {
        return Err(FlowError::EmptyBatch);
    }
    let picks: Vec<usize> = if batch_size >= data.len() {
        (0..batch_size).map(|i| i % data.len()).collect()
    } else {
        index::sample(rng, data.len(), batch_size).into_vec()
    };
    picks
        .into_iter()
        .map(|i| {
            let ex = &data[i];
            let x1 = gaussian(ex.x0.len(), rng);
            let t: f64 = rng.random();
            FlowSample::new(ex.x0.clone(), x1, t, ex.h.clone())
        })
        .collect()
}

/// One Adam step on a fresh batch. Returns the batch loss before the update.
pub fn editor_train_step<R: Rng>(
    net: &mut VelocityNet,
    opt: &mut Adam,
    data: &[EditorExample],
    batch_size: usize,
    rng: &mut R,
    lr: f64,
) -> Result<f64, FlowError> {
    let batch = build_batch(data, batch_size, rng)?;
    let (loss, grad) = fm_loss_grad(net, &batch)?;
    opt.step(net, &grad, lr);
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditorConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub ode_steps: usize,
    pub net: NetConfig,
    pub encoder: ConditionEncoder,
}

impl Default for EditorConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 64,
            lr: 2e-3,
            seed: 0,
            ode_steps: 50,
            net: NetConfig::default(),
            encoder: ConditionEncoder::default(),
        }
    }
}

impl EditorConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.ode_steps == 0 {
            return Err(FlowError::BadConfig("ode_steps must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(FlowError::BadConfig("lr must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(FlowError::BadConfig("batch_size must be positive".into()));
        }
        if self.net.cond_dim != self.encoder.dim {
            return Err(FlowError::BadConfig(format!(
                "net cond_dim {} differs from encoder dim {}",
                self.net.cond_dim, self.encoder.dim
            )));
        }
        Ok(())
    }
}

/// Trains `net` for `cfg.steps` steps and returns the per-step batch losses.
pub fn train_editor(
    net: &mut VelocityNet,
    data: &[EditorExample],
    cfg: &EditorConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>, FlowError> {
    cfg.validate()?;
    let mut opt = Adam::new(net.num_params());
    let mut r = rng::stream(cfg.seed, "flow/train", 0);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let loss = editor_train_step(net, &mut opt, data, cfg.batch_size, &mut r, cfg.lr)?;
        on_step(step, loss);
        losses.push(loss);
    }
    Ok(losses)
}

/// Euler integration from `x1` at `t = 0` to `t = 1`.
pub fn integrate(net: &VelocityNet, h: &[f64], steps: usize, x1: Vec<f64>) -> Result<Vec<f64>, FlowError> {
    if steps == 0 {
        return Err(FlowError::BadConfig("ode steps must be at least 1".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x1;
    for k in 0..steps {
        let v = net.forward(&x, k as f64 * dt, h)?;
        x.iter_mut().zip(v).for_each(|(a, b)| *a += dt * b);
    }
    Ok(x)
}

/// Draws `x_1 ~ N(0, I)` and integrates it to a reconstruction of `x_0`.
pub fn sample_ode<R: Rng>(net: &VelocityNet, h: &[f64], steps: usize, rng: &mut R) -> Result<Vec<f64>, FlowError> {
    let x1 = gaussian(net.latent_dim(), rng);
    integrate(net, h, steps, x1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EditorCheckpoint {
    format_version: u32,
    vocab_fingerprint: String,
    encoder: ConditionEncoder,
    net: VelocityNet,
}

pub fn save_editor(
    path: &Path,
    net: &VelocityNet,
    encoder: &ConditionEncoder,
    vocab_fingerprint: &str,
) -> Result<(), FlowError> {
    let ck = EditorCheckpoint {
        format_version: CHECKPOINT_VERSION,
        vocab_fingerprint: vocab_fingerprint.to_string(),
        encoder: encoder.clone(),
        net: net.clone(),
    };
    std::fs::write(path, serde_json::to_vec(&ck)?)?;
    Ok(())
}

pub fn load_editor(path: &Path, vocab_fingerprint: &str) -> Result<(VelocityNet, ConditionEncoder), FlowError> {
    let ck: EditorCheckpoint = serde_json::from_slice(&std::fs::read(path)?)?;
    if ck.format_version != CHECKPOINT_VERSION {
        return Err(FlowError::CheckpointMismatch(format!(
            "unsupported editor checkpoint version {}",
            ck.format_version
        )));
    }
    if ck.vocab_fingerprint != vocab_fingerprint {
        return Err(FlowError::CheckpointMismatch("vocabulary fingerprint differs".into()));
    }
    if ck.net.config().cond_dim != ck.encoder.dim || ck.net.num_params() != ck.net.params().len() {
        return Err(FlowError::CheckpointMismatch("inconsistent editor shapes".into()));
    }
    if !ck.net.is_finite() {
        return Err(FlowError::CheckpointMismatch("non-finite editor parameters".into()));
    }
    Ok((ck.net, ck.encoder))
}
