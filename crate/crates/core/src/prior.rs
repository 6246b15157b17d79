//! Bernoulli-Gaussian factor prior and its scalar denoiser.
//!
//! Each factor entry in column `r` is exactly zero with probability
//! `1 - lambda_r` and standard normal otherwise. Given a Gaussian
//! pseudo-measurement `N(q_mean, q_var)` of the entry, [`denoise`] returns
//! the posterior mean, variance and the posterior probability that the
//! entry is nonzero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::quadrature;

/// Bernoulli parameters are kept inside `[LAMBDA_MIN, LAMBDA_MAX]`.
pub const LAMBDA_MIN: f64 = 1e-12;
pub const LAMBDA_MAX: f64 = 1.0 - 1e-12;

pub fn clamp_lambda(lambda: f64) -> f64 {
    if lambda.is_nan() {
        return LAMBDA_MIN;
    }
    lambda.clamp(LAMBDA_MIN, LAMBDA_MAX)
}

/// Per-column Bernoulli parameters; the slab variance is fixed at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BGPrior {
    lambdas: Vec<f64>,
}

impl BGPrior {
    pub fn new(lambdas: impl IntoIterator<Item = f64>) -> Self {
        Self {
            lambdas: lambdas.into_iter().map(clamp_lambda).collect(),
        }
    }

    pub fn uniform(rank: usize, lambda: f64) -> Self {
        Self::new(std::iter::repeat_n(lambda, rank))
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn rank(&self) -> usize {
        self.lambdas.len()
    }

    pub fn select_columns(&self, keep: &[usize]) -> Self {
        Self {
            lambdas: keep.iter().map(|&c| self.lambdas[c]).collect(),
        }
    }
}

/// Posterior summary of one factor entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserResult {
    pub mean: f64,
    pub variance: f64,
    pub support_prob: f64,
}

fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - d * d / (2.0 * var)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Closed-form Bernoulli-Gaussian denoiser.
pub fn denoise(q_mean: f64, q_var: f64, lambda: f64) -> Result<DenoiserResult> {
    if !(q_var > 0.0) || !q_var.is_finite() {
        return Err(Error::Domain(format!(
            "q_var must be positive, got {q_var}"
        )));
    }
    if !q_mean.is_finite() {
        return Err(Error::Domain(format!(
            "q_mean must be finite, got {q_mean}"
        )));
    }
    Ok(denoise_unchecked(q_mean, q_var, lambda))
}

#[inline]
pub(crate) fn denoise_unchecked(q_mean: f64, q_var: f64, lambda: f64) -> DenoiserResult {
    let lambda = clamp_lambda(lambda);
    // Slab posterior N(gamma, v) from combining N(0, 1) with N(q_mean, q_var).
    let gamma = (q_mean / q_var) / (1.0 / q_var + 1.0);
    let v = 1.0 / (1.0 / q_var + 1.0);
    let log_odds = lambda.ln() - (-lambda).ln_1p() + log_normal_pdf(q_mean, 0.0, 1.0 + q_var)
        - log_normal_pdf(q_mean, 0.0, q_var);
    let pi = sigmoid(log_odds);
    DenoiserResult {
        mean: pi * gamma,
        variance: pi * v + pi * (1.0 - pi) * gamma * gamma,
        support_prob: pi,
    }
}

const QUAD_LO: f64 = -10.0;
const QUAD_HI: f64 = 10.0;
const QUAD_TOL: f64 = 1e-12;
const QUAD_GRID: usize = 4000;

/// Posterior moments by direct normalization of the spike-and-slab
/// posterior: the spike enters as a point mass at zero and the slab part is
/// integrated numerically over `[-10, 10]`. Used to cross-check [`denoise`].
pub fn denoise_oracle(q_mean: f64, q_var: f64, lambda: f64) -> Result<DenoiserResult> {
    if !(q_var > 0.0) || !q_var.is_finite() {
        return Err(Error::Domain(format!(
            "q_var must be positive, got {q_var}"
        )));
    }
    let lambda = clamp_lambda(lambda);
    let log_slab =
        |a: f64| lambda.ln() + log_normal_pdf(a, 0.0, 1.0) + log_normal_pdf(a, q_mean, q_var);
    let log_spike = (-lambda).ln_1p() + log_normal_pdf(0.0, q_mean, q_var);

    // Locate the slab peak on a grid; it anchors the rescaling and the
    // quadrature breakpoints.
    let step = (QUAD_HI - QUAD_LO) / QUAD_GRID as f64;
    let (peak, peak_log) = (0..=QUAD_GRID)
        .map(|k| {
            let a = QUAD_LO + step * k as f64;
            (a, log_slab(a))
        })
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .expect("non-empty grid");
    let shift = peak_log.max(log_spike);
    let slab = |a: f64| (log_slab(a) - shift).exp();

    let mut breaks = vec![peak];
    for k in 1..=8 {
        let d = step * (1 << (k - 1)) as f64;
        breaks.push(peak - d);
        breaks.push(peak + d);
    }
    breaks.push(0.0);

    let max_intervals = 5000;
    let mass = quadrature::integrate(slab, QUAD_LO, QUAD_HI, &breaks, QUAD_TOL, max_intervals)?;
    let first = quadrature::integrate(
        |a| (a - peak) * slab(a),
        QUAD_LO,
        QUAD_HI,
        &breaks,
        QUAD_TOL,
        max_intervals,
    )?;
    let second = quadrature::integrate(
        |a| (a - peak) * (a - peak) * slab(a),
        QUAD_LO,
        QUAD_HI,
        &breaks,
        QUAD_TOL,
        max_intervals,
    )?;

    let spike = (log_spike - shift).exp();
    let total = spike + mass;
    // Moments about `peak`; the spike sits at a = 0, i.e. offset -peak.
    let m1 = (first + spike * (-peak)) / total;
    let m2 = (second + spike * peak * peak) / total;
    Ok(DenoiserResult {
        mean: peak + m1,
        variance: (m2 - m1 * m1).max(0.0),
        support_prob: mass / total,
    })
}

/// Sub-stream for the randomized denoiser comparison.
pub const ORACLE_STREAM: u64 = 5;

/// Largest deviations between [`denoise`] and [`denoise_oracle`] over a batch
/// of random inputs. Mean and variance deviations are relative to
/// `1 + |value|`; the support-probability deviation is absolute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleReport {
    pub samples: usize,
    pub max_mean_dev: f64,
    pub max_var_dev: f64,
    pub max_pi_dev: f64,
}

impl OracleReport {
    /// Means and variances within `tol`, support probabilities within
    /// `tol / 100`.
    pub fn within(&self, tol: f64) -> bool {
        self.max_mean_dev <= tol && self.max_var_dev <= tol && self.max_pi_dev <= tol / 100.0
    }
}

/// Compares the closed-form denoiser against the quadrature oracle on
/// `samples` triples drawn uniformly from `q_mean in [-5, 5]`,
/// `q_var in [1e-3, 10]`, `lambda in [0.01, 0.99]`.
pub fn compare_with_oracle(samples: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ORACLE_STREAM);
    let mut report = OracleReport {
        samples,
        max_mean_dev: 0.0,
        max_var_dev: 0.0,
        max_pi_dev: 0.0,
    };
    for _ in 0..samples {
        let q = rng.random_range(-5.0..=5.0);
        let v = rng.random_range(1e-3..=10.0);
        let l = rng.random_range(0.01..=0.99);
        let fast = denoise(q, v, l)?;
        let slow = denoise_oracle(q, v, l)?;
        report.max_mean_dev = report
            .max_mean_dev
            .max((fast.mean - slow.mean).abs() / (1.0 + slow.mean.abs()));
        report.max_var_dev = report
            .max_var_dev
            .max((fast.variance - slow.variance).abs() / (1.0 + slow.variance));
        report.max_pi_dev = report
            .max_pi_dev
            .max((fast.support_prob - slow.support_prob).abs());
    }
    Ok(report)
}

/// Draws `count` i.i.d. samples from the prior with parameter `lambda`.
pub fn sample_prior(lambda: f64, seed: u64, count: usize) -> Vec<f64> {
    let lambda = clamp_lambda(lambda);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let u: f64 = rng.random();
            if u < lambda {
                rng.sample(StandardNormal)
            } else {
                0.0
            }
        })
        .collect()
}
