//! Correlation metrics and paired bootstrap significance testing.
//!
//! Everything here accumulates in f64 regardless of how the model side
//! stores its numbers. The bootstrap draws one derived PRNG stream per
//! iteration, so results do not depend on evaluation order.

use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("k = {k} exceeds vector length {g}")]
    KTooLarge { k: usize, g: usize },
}

/// Product-moment correlation with two-pass f64 accumulation. A
/// zero-variance side yields 0 rather than NaN.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch {
            a: x.len(),
            b: y.len(),
        });
    }
    assert!(x.len() >= 2, "pearson needs at least two points");
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let dx = xi - mx;
        let dy = yi - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Indices of the k largest |obs - baseline|, ties broken toward the lower
/// index, returned in ascending index order.
pub fn deg_indices(obs: &[f64], baseline: &[f64], k: usize) -> Result<Vec<usize>, MetricsError> {
    if obs.len() != baseline.len() {
        return Err(MetricsError::LengthMismatch {
            a: obs.len(),
            b: baseline.len(),
        });
    }
    if k > obs.len() {
        return Err(MetricsError::KTooLarge { k, g: obs.len() });
    }
    let mut order: Vec<usize> = (0..obs.len()).collect();
    order.sort_by(|&i, &j| {
        let di = (obs[i] - baseline[i]).abs();
        let dj = (obs[j] - baseline[j]).abs();
        dj.total_cmp(&di).then(i.cmp(&j))
    });
    let mut picked: Vec<usize> = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Correlation restricted to the k most strongly perturbed genes, ranked by
/// the observed delta from baseline. With k equal to the gene count the
/// selection is the identity and the result matches `pearson` exactly.
pub fn deg_correlation(
    pred: &[f64],
    obs: &[f64],
    baseline: &[f64],
    k: usize,
) -> Result<f64, MetricsError> {
    if pred.len() != obs.len() {
        return Err(MetricsError::LengthMismatch {
            a: pred.len(),
            b: obs.len(),
        });
    }
    let idx = deg_indices(obs, baseline, k)?;
    let p: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
    let o: Vec<f64> = idx.iter().map(|&i| obs[i]).collect();
    pearson(&p, &o)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub mean_diff: f64,
    pub ci95: (f64, f64),
    pub p_one_sided: f64,
}

/// Paired bootstrap over per-sample metrics. Each iteration resamples the
/// sample indices with replacement and records mean(a) - mean(b) on the
/// resample; the CI is the empirical 2.5/97.5 percentile band and the
/// one-sided p-value is (1 + #{diff <= 0}) / (iters + 1).
pub fn paired_bootstrap(
    a: &[f64],
    b: &[f64],
    iters: usize,
    seed: u64,
) -> Result<BootstrapReport, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    let s = a.len();
    assert!(s >= 2, "paired bootstrap needs at least two samples");
    assert!(iters >= 1);
    let mean_diff =
        a.iter().sum::<f64>() / s as f64 - b.iter().sum::<f64>() / s as f64;
    let mut diffs = Vec::with_capacity(iters);
    let mut n_nonpositive = 0usize;
    for it in 0..iters {
        let mut r = rng::stream(seed, "bootstrap", &[it as u64]);
        let mut sa = 0.0;
        let mut sb = 0.0;
        for _ in 0..s {
            let idx = r.random_range(0..s);
            sa += a[idx];
            sb += b[idx];
        }
        let d = (sa - sb) / s as f64;
        if d <= 0.0 {
            n_nonpositive += 1;
        }
        diffs.push(d);
    }
    diffs.sort_by(f64::total_cmp);
    let ci95 = (percentile(&diffs, 0.025), percentile(&diffs, 0.975));
    let p_one_sided = (1 + n_nonpositive) as f64 / (iters + 1) as f64;
    Ok(BootstrapReport {
        mean_diff,
        ci95,
        p_one_sided,
    })
}

/// Percentile of a sorted slice with linear interpolation between order
/// statistics.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        return sorted[lo];
    }
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}
