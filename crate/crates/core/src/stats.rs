//! Small statistics helpers: trend tests and bootstrap intervals.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::rng;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Trailing moving average; element `i` averages `xs[i + 1 - window ..= i]`.
/// The output has `xs.len() - window + 1` elements.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || xs.len() < window {
        return Vec::new();
    }
    xs.windows(window).map(mean).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KendallResult {
    pub tau_b: f64,
    /// Normal-approximation z statistic of the concordance count.
    pub z: f64,
    /// Two-sided p-value.
    pub p_value: f64,
}

fn tie_terms(sorted: &mut [f64]) -> (f64, f64) {
    sorted.sort_by(f64::total_cmp);
    let (mut pairs, mut var) = (0.0, 0.0);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        pairs += t * (t - 1.0) / 2.0;
        var += t * (t - 1.0) * (2.0 * t + 5.0);
        i = j;
    }
    (pairs, var)
}

/// Kendall's τ-b between `x` and `y` with a tie-corrected normal p-value.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> KendallResult {
    assert_eq!(x.len(), y.len(), "kendall_tau_b needs paired samples");
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let a = (x[j] - x[i]).signum() * f64::from(x[j] != x[i]);
            let b = (y[j] - y[i]).signum() * f64::from(y[j] != y[i]);
            s += a * b;
        }
    }
    let n0 = (n * n.saturating_sub(1)) as f64 / 2.0;
    let (tx, vx) = tie_terms(&mut x.to_vec());
    let (ty, vy) = tie_terms(&mut y.to_vec());
    let denom = ((n0 - tx) * (n0 - ty)).sqrt();
    let tau_b = if denom > 0.0 { s / denom } else { 0.0 };
    let nf = n as f64;
    let var_s = (nf * (nf - 1.0) * (2.0 * nf + 5.0) - vx - vy) / 18.0;
    let z = if var_s > 0.0 { s / var_s.sqrt() } else { 0.0 };
    let normal = Normal::standard();
    let p_value = (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0);
    KendallResult { tau_b, z, p_value }
}

/// Kendall trend test of a series against its index.
pub fn trend_test(series: &[f64]) -> KendallResult {
    let idx: Vec<f64> = (0..series.len()).map(|i| i as f64).collect();
    kendall_tau_b(&idx, series)
}

/// Linear-interpolated quantile of a sorted sample.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval for the mean of `xs` at level `1 - alpha`.
pub fn bootstrap_mean_ci(xs: &[f64], resamples: usize, alpha: f64, seed: u64) -> (f64, f64) {
    if xs.is_empty() || resamples == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut r = rng::stream(seed, "stats/bootstrap", 0);
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            let s: f64 = (0..xs.len()).map(|_| xs[r.random_range(0..xs.len())]).sum();
            s / xs.len() as f64
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    (
        quantile_sorted(&stats, alpha / 2.0),
        quantile_sorted(&stats, 1.0 - alpha / 2.0),
    )
}
