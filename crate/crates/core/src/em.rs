//! EM learning of the Bernoulli parameters and the noise power, interleaved
//! with CP-GAMP sweeps, plus column pruning for rank selection.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamp::{check_finite, initialize_factors, sweep, GampConfig, GampState};
use crate::observation::ObservationModel;
use crate::prior::{clamp_lambda, BGPrior};
use crate::tensor::{DenseTensor, FactorState, Matrix};

pub const MIN_NOISE_POWER: f64 = 1e-12;
pub const MAX_DEFAULT_RANK: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EMConfig {
    pub prune_threshold: f64,
    pub initial_lambda: f64,
    pub initial_noise_power: f64,
    pub em_enabled: bool,
}

impl Default for EMConfig {
    fn default() -> Self {
        Self {
            prune_threshold: 1e-2,
            initial_lambda: 0.5,
            initial_noise_power: 1.0,
            em_enabled: true,
        }
    }
}

impl EMConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prune_threshold > 0.0 && self.prune_threshold < 1.0) {
            return Err(Error::Config(format!(
                "prune threshold must lie in (0, 1), got {}",
                self.prune_threshold
            )));
        }
        if !(self.initial_lambda > 0.0 && self.initial_lambda <= 1.0) {
            return Err(Error::Config(format!(
                "initial lambda must lie in (0, 1], got {}",
                self.initial_lambda
            )));
        }
        if !(self.initial_noise_power > 0.0 && self.initial_noise_power.is_finite()) {
            return Err(Error::Config(format!(
                "initial noise power must be positive, got {}",
                self.initial_noise_power
            )));
        }
        Ok(())
    }
}

/// Surviving columns, identified by their index in the initial factor state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankEstimate {
    pub active_columns: Vec<usize>,
    pub estimated_rank: usize,
}

impl RankEstimate {
    pub fn full(rank: usize) -> Self {
        Self {
            active_columns: (0..rank).collect(),
            estimated_rank: rank,
        }
    }
}

/// Default column count for adaptive runs: the smallest dimension, capped.
pub fn default_initial_rank(dims: &[usize]) -> usize {
    dims.iter()
        .copied()
        .min()
        .unwrap_or(1)
        .clamp(1, MAX_DEFAULT_RANK)
}

/// Per-column average of the support probabilities over every factor entry,
/// before clamping.
pub fn mean_support(support_probs: &[Matrix]) -> Vec<f64> {
    let Some(first) = support_probs.first() else {
        return Vec::new();
    };
    let rank = first.cols();
    let rows: usize = support_probs.iter().map(Matrix::rows).sum();
    let mut sums = vec![0.0; rank];
    for m in support_probs {
        for i in 0..m.rows() {
            for (s, p) in sums.iter_mut().zip(m.row(i)) {
                *s += p;
            }
        }
    }
    sums.into_iter().map(|s| s / rows as f64).collect()
}

/// EM update of the Bernoulli parameters, clamped into the open unit interval.
pub fn update_lambda(support_probs: &[Matrix]) -> Vec<f64> {
    mean_support(support_probs)
        .into_iter()
        .map(clamp_lambda)
        .collect()
}

/// `mean(|y - z_mean|^2 + z_var)` over the observed entries, before flooring.
pub fn noise_power_estimate(
    obs: &ObservationModel,
    z_mean: &DenseTensor,
    z_var: &DenseTensor,
) -> Result<f64> {
    z_mean.ensure_same_shape(obs.y(), "z_mean")?;
    z_var.ensure_same_shape(obs.y(), "z_var")?;
    if obs.observed_count() == 0 {
        return Err(Error::Domain(
            "noise power cannot be learned without observed entries".into(),
        ));
    }
    let y = obs.y().values();
    let zm = z_mean.values();
    let zv = z_var.values();
    let mut total = 0.0;
    for k in 0..y.len() {
        if obs.is_observed(k) {
            let d = y[k] - zm[k];
            total += d * d + zv[k];
        }
    }
    Ok(total / obs.observed_count() as f64)
}

/// EM update of the noise power, floored at [`MIN_NOISE_POWER`].
pub fn update_noise_power(
    obs: &ObservationModel,
    z_mean: &DenseTensor,
    z_var: &DenseTensor,
) -> Result<f64> {
    Ok(noise_power_estimate(obs, z_mean, z_var)?.max(MIN_NOISE_POWER))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub factors: FactorState,
    pub prior: BGPrior,
    pub support_probs: Vec<Matrix>,
    /// Indices refer to the columns of the input state.
    pub rank: RankEstimate,
}

/// Drops every column whose Bernoulli parameter is below `threshold`. If that
/// would remove everything, the column with the largest parameter is kept.
pub fn prune_columns(
    factors: &FactorState,
    prior: &BGPrior,
    support_probs: &[Matrix],
    threshold: f64,
) -> Result<PruneOutcome> {
    let keep = surviving_columns(factors, prior, support_probs, threshold)?;
    Ok(PruneOutcome {
        factors: factors.select_columns(&keep),
        prior: prior.select_columns(&keep),
        support_probs: support_probs
            .iter()
            .map(|m| m.select_columns(&keep))
            .collect(),
        rank: RankEstimate {
            estimated_rank: keep.len(),
            active_columns: keep,
        },
    })
}

fn surviving_columns(
    factors: &FactorState,
    prior: &BGPrior,
    support_probs: &[Matrix],
    threshold: f64,
) -> Result<Vec<usize>> {
    let rank = factors.rank();
    if prior.rank() != rank || support_probs.iter().any(|m| m.cols() != rank) {
        return Err(Error::Dimension(format!(
            "inconsistent column counts: factors {rank}, prior {}",
            prior.rank()
        )));
    }
    let lambdas = prior.lambdas();
    let mut keep: Vec<usize> = (0..rank).filter(|&r| lambdas[r] >= threshold).collect();
    if keep.is_empty() {
        let best = (0..rank)
            .max_by(|&a, &b| lambdas[a].total_cmp(&lambdas[b]).then(b.cmp(&a)))
            .expect("rank >= 1");
        keep.push(best);
    }
    Ok(keep)
}

/// One row of the adaptive-run history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub relative_change: f64,
    pub current_rank: usize,
    pub noise_power: f64,
    pub lambdas: Vec<f64>,
}

impl IterationRecord {
    pub fn lambda_min(&self) -> f64 {
        self.lambdas.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambdas
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct AdaptiveOutcome {
    pub state: GampState,
    pub prior: BGPrior,
    pub rank: RankEstimate,
    pub noise_power: f64,
    pub history: Vec<IterationRecord>,
    pub iterations: usize,
    pub converged: bool,
}

/// Adaptive CP-GAMP: each iteration runs one sweep, then updates the
/// Bernoulli parameters, prunes weak columns and updates the noise power.
pub fn adaptive_run(
    obs: &ObservationModel,
    gamp_config: &GampConfig,
    em_config: &EMConfig,
    initial_rank: usize,
) -> Result<AdaptiveOutcome> {
    adaptive_run_with(obs, gamp_config, em_config, initial_rank, |_, _| {})
}

/// [`adaptive_run`] with a callback after every iteration.
pub fn adaptive_run_with(
    obs: &ObservationModel,
    gamp_config: &GampConfig,
    em_config: &EMConfig,
    initial_rank: usize,
    mut on_iteration: impl FnMut(&IterationRecord, &GampState),
) -> Result<AdaptiveOutcome> {
    gamp_config.validate()?;
    em_config.validate()?;
    if initial_rank == 0 {
        return Err(Error::Domain("initial rank must be at least 1".into()));
    }
    let init = initialize_factors(obs.y().shape().dims(), initial_rank, gamp_config.seed)?;
    let mut obs = obs.clone();
    obs.set_noise_power(em_config.initial_noise_power)?;
    let mut prior = BGPrior::uniform(initial_rank, em_config.initial_lambda);
    let mut state = GampState::new(init, gamp_config.variance_floor);
    let mut active: Vec<usize> = (0..initial_rank).collect();
    let mut history = Vec::new();
    let mut converged = false;

    for _ in 0..gamp_config.max_iterations {
        let report = sweep(&mut state, &obs, &prior, gamp_config)?;
        check_finite(&state)?;
        if em_config.em_enabled {
            prior = BGPrior::new(update_lambda(&state.support_probs));
            let keep = surviving_columns(
                &state.factors,
                &prior,
                &state.support_probs,
                em_config.prune_threshold,
            )?;
            if keep.len() < prior.rank() {
                state.retain_columns(&keep);
                prior = prior.select_columns(&keep);
                active = keep.iter().map(|&c| active[c]).collect();
            }
            let nw = update_noise_power(&obs, &state.z_mean, &state.z_var)?;
            if !nw.is_finite() {
                return Err(Error::Divergence {
                    iteration: state.iteration,
                    field: "noise_power".into(),
                });
            }
            obs.set_noise_power(nw)?;
        }
        let record = IterationRecord {
            iteration: state.iteration,
            relative_change: report.relative_change,
            current_rank: state.rank(),
            noise_power: obs.noise_power(),
            lambdas: prior.lambdas().to_vec(),
        };
        on_iteration(&record, &state);
        history.push(record);
        if report.converged {
            converged = true;
            break;
        }
    }

    let iterations = state.iteration;
    Ok(AdaptiveOutcome {
        rank: RankEstimate {
            estimated_rank: active.len(),
            active_columns: active,
        },
        noise_power: obs.noise_power(),
        prior,
        state,
        history,
        iterations,
        converged,
    })
}

/// Writes the history as CSV:
/// `iteration,relative_change,current_R,noise_power,lambda_min,lambda_max`.
pub fn write_history_csv<W: Write>(mut w: W, history: &[IterationRecord]) -> Result<()> {
    writeln!(
        w,
        "iteration,relative_change,current_R,noise_power,lambda_min,lambda_max"
    )?;
    for h in history {
        writeln!(
            w,
            "{},{:e},{},{:e},{:e},{:e}",
            h.iteration,
            h.relative_change,
            h.current_rank,
            h.noise_power,
            h.lambda_min(),
            h.lambda_max()
        )?;
    }
    w.flush()?;
    Ok(())
}
