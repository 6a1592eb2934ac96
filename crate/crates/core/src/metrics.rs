//! Likelihood-based evaluation of base and tamed models.
//!
//! Everything here works on NLL values in nats. The likelihood quantile of a
//! point is the upper tail of the remember-set NLL fit at the point's NLL:
//! near 1 means the point is more likely than almost every remember point,
//! near 0 means it is practically never sampled.

use std::f64::consts::{LN_2, SQRT_2};

use ndarray::ArrayView1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::flow::FlowModel;

/// Smallest standard deviation accepted for an NLL fit.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Mean and standard deviation of a normal fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mu: f64,
    pub sigma: f64,
}

impl Gaussian {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        let g = Gaussian { mu, sigma };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > SIGMA_FLOOR) || !self.mu.is_finite() || !self.sigma.is_finite() {
            return Err(Error::DegenerateStats {
                sigma: self.sigma,
                floor: SIGMA_FLOOR,
            });
        }
        Ok(())
    }
}

/// Sample mean and population standard deviation.
pub fn fit_gaussian(values: &[f64]) -> Result<Gaussian> {
    if values.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: values.len(),
        });
    }
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    Gaussian::new(mu, var.sqrt())
}

/// Standard normal CDF.
pub fn phi(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// `1 - phi(z)`, computed without cancellation in the upper tail.
pub fn upper_tail(z: f64) -> f64 {
    0.5 * libm::erfc(z / SQRT_2)
}

pub fn normal_cdf(x: f64, mu: f64, sigma: f64) -> Result<f64> {
    Gaussian::new(mu, sigma)?;
    Ok(phi((x - mu) / sigma))
}

/// Likelihood quantile of a single NLL value.
pub fn quantile_of_nll(nll: f64, stats: &Gaussian) -> Result<f64> {
    stats.validate()?;
    Ok(upper_tail((nll - stats.mu) / stats.sigma))
}

/// Per-point likelihood quantiles of `points` under `model`.
pub fn likelihood_quantiles(model: &FlowModel, points: &Matrix, stats: &Gaussian) -> Result<Vec<f64>> {
    stats.validate()?;
    model
        .nll(points)?
        .into_iter()
        .map(|v| quantile_of_nll(v, stats))
        .collect()
}

/// Mean likelihood quantile over a set.
pub fn likelihood_quantile(model: &FlowModel, set: &Matrix, stats: &Gaussian) -> Result<f64> {
    if set.nrows() == 0 {
        return Err(Error::EmptyInput("quantile set"));
    }
    let q = likelihood_quantiles(model, set, stats)?;
    Ok(mean(&q))
}

/// Quantile at the forget threshold: `1 - phi(delta)`.
pub fn forgotten_tail(delta: f64) -> f64 {
    upper_tail(delta)
}

/// A point counts as forgotten when its quantile is at or below `1 - phi(delta)`,
/// i.e. its NLL is at least `mu + delta * sigma`.
pub fn is_forgotten_nll(nll: f64, stats: &Gaussian, delta: f64) -> Result<bool> {
    Ok(quantile_of_nll(nll, stats)? <= forgotten_tail(delta))
}

pub fn is_forgotten(model: &FlowModel, points: &Matrix, stats: &Gaussian, delta: f64) -> Result<Vec<bool>> {
    stats.validate()?;
    model
        .nll(points)?
        .into_iter()
        .map(|v| is_forgotten_nll(v, stats, delta))
        .collect()
}

/// `q_base(set) - q_tamed(set)` where each model's quantile uses the NLL fit
/// of that same model on `remember`.
pub fn quantile_drop(base: &FlowModel, tamed: &FlowModel, set: &Matrix, remember: &Matrix) -> Result<f64> {
    if base.dim() != tamed.dim() {
        return Err(Error::Shape(format!(
            "models disagree on dim: {} vs {}",
            base.dim(),
            tamed.dim()
        )));
    }
    let base_stats = fit_gaussian(&base.nll(remember)?)?;
    let tamed_stats = fit_gaussian(&tamed.nll(remember)?)?;
    Ok(likelihood_quantile(base, set, &base_stats)? - likelihood_quantile(tamed, set, &tamed_stats)?)
}

/// Bits per dimension.
pub fn bpd(nll_nats: f64, dim: usize) -> f64 {
    nll_nats / (dim as f64 * LN_2)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    /// Parameters are fitted on the same sample and no Lilliefors correction
    /// is applied, so the p-value is approximate (conservative).
    pub approximate: bool,
}

pub const KS_MIN_SAMPLES: usize = 20;

/// One-sample KS test of `values` against the normal fitted to them.
pub fn ks_normality_test(values: &[f64]) -> Result<KsResult> {
    if values.len() < KS_MIN_SAMPLES {
        return Err(Error::InsufficientData {
            needed: KS_MIN_SAMPLES,
            got: values.len(),
        });
    }
    let fit = fit_gaussian(values)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let cdf = phi((x - fit.mu) / fit.sigma);
        let above = (i + 1) as f64 / n - cdf;
        let below = cdf - i as f64 / n;
        d = d.max(above).max(below);
    }
    let d = d.clamp(0.0, 1.0);
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_survival(n.sqrt() * d),
        n: sorted.len(),
        approximate: true,
    })
}

/// `P(K > lambda)` for the limiting Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Jacobi-theta form converges fast for small lambda.
        let pi2 = std::f64::consts::PI.powi(2);
        let c = (2.0 * std::f64::consts::PI).sqrt() / lambda;
        let mut cdf = 0.0;
        for k in 1..=20 {
            let odd = (2 * k - 1) as f64;
            cdf += (-odd * odd * pi2 / (8.0 * lambda * lambda)).exp();
        }
        (1.0 - c * cdf).clamp(0.0, 1.0)
    } else {
        let mut sum = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            let term = (-2.0 * kf * kf * lambda * lambda).exp();
            sum += if k % 2 == 1 { term } else { -term };
            if term < 1e-300 {
                break;
            }
        }
        (2.0 * sum).clamp(0.0, 1.0)
    }
}

/// Label of the nearest mean (Euclidean).
pub fn nearest_mean(means: &[Vec<f64>], point: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, m) in means.iter().enumerate() {
        let d: f64 = m.iter().zip(point.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Label histogram of classified samples, normalized to fractions.
pub fn label_fractions<F>(points: &Matrix, n_labels: usize, classify: F) -> Vec<f64>
where
    F: Fn(ArrayView1<'_, f64>) -> usize,
{
    let mut counts = vec![0usize; n_labels];
    for row in points.rows() {
        let label = classify(row);
        if label < n_labels {
            counts[label] += 1;
        }
    }
    let n = points.nrows().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// Sample `n_samples` points from `model` and return the fraction assigned to
/// each label by `classify`.
pub fn attribute_fraction<F, R>(
    model: &FlowModel,
    classify: F,
    n_labels: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    F: Fn(ArrayView1<'_, f64>) -> usize,
    R: Rng + ?Sized,
{
    if n_samples == 0 {
        return Err(Error::InvalidCount("n_samples must be positive".into()));
    }
    let samples = model.sample(n_samples, rng)?;
    Ok(label_fractions(&samples, n_labels, classify))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub density: f64,
}

/// Equal-width density histogram over `[min, max]` of the values.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if values.is_empty() {
        return Err(Error::EmptyInput("histogram values"));
    }
    if bins == 0 {
        return Err(Error::InvalidCount("histogram needs at least one bin".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NonFinite("histogram values"));
    }
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let n = values.len() as f64;
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(k, c)| HistogramBin {
            bin_left: lo + k as f64 * width,
            bin_right: lo + (k + 1) as f64 * width,
            density: c as f64 / (n * width),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileEntry {
    pub set_name: String,
    pub q_base: f64,
    pub q_tamed: f64,
    pub quantile_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileReport {
    pub entries: Vec<QuantileEntry>,
    pub threshold_met: bool,
    pub delta: f64,
    pub epsilon: f64,
    /// `1 - phi(delta)`, the quantile of a point sitting exactly on the threshold.
    pub forgotten_tail: f64,
    pub base_stats: Gaussian,
    pub tamed_stats: Gaussian,
    pub stats_source: String,
}

/// Quantile report over named sets. Each model's quantiles use that model's
/// own NLL fit on `remember`.
pub fn quantile_report(
    base: &FlowModel,
    tamed: &FlowModel,
    sets: &[(&str, &Matrix)],
    remember: &Matrix,
    delta: f64,
    epsilon: f64,
    threshold_met: bool,
) -> Result<QuantileReport> {
    let base_stats = fit_gaussian(&base.nll(remember)?)?;
    let tamed_stats = fit_gaussian(&tamed.nll(remember)?)?;
    let mut entries = Vec::with_capacity(sets.len());
    for (name, set) in sets {
        let q_base = likelihood_quantile(base, set, &base_stats)?;
        let q_tamed = likelihood_quantile(tamed, set, &tamed_stats)?;
        entries.push(QuantileEntry {
            set_name: (*name).to_string(),
            q_base,
            q_tamed,
            quantile_drop: q_base - q_tamed,
        });
    }
    Ok(QuantileReport {
        entries,
        threshold_met,
        delta,
        epsilon,
        forgotten_tail: forgotten_tail(delta),
        base_stats,
        tamed_stats,
        stats_source: "per-model fit of remember-set NLL".into(),
    })
}
