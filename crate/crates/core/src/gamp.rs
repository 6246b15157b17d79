//! CP-GAMP: approximate message passing for CP decomposition.
//!
//! One [`sweep`] runs the five phases in order:
//!
//! 1. output moments `p_mean`, `p_var` of every tensor entry from the
//!    current factor posteriors;
//! 2. the observation channel, giving `z_mean`, `z_var`;
//! 3. scaled residuals `s_mean`, `s_var`;
//! 4. input moments `q_mean`, `q_var` of every factor entry, aggregated over
//!    all tensor entries that share its row;
//! 5. the Bernoulli-Gaussian denoiser, giving new factor means/variances.
//!
//! Each phase is a barrier. All reductions run in a fixed row-major order so
//! results are bit-reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observation::{apply_channel_into, ObservationModel};
use crate::prior::{denoise_unchecked, BGPrior};
use crate::tensor::{advance, DenseTensor, FactorState, Matrix, MultiIndex, Shape};

/// Leave-one-out means below this magnitude are never divided out.
const ZERO_MEAN_GUARD: f64 = 1e-8;

/// Sub-stream used for factor initialization.
pub const INIT_STREAM: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GampConfig {
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub damping: f64,
    pub variance_floor: f64,
    /// Seed of the factor initialization. Experiment configs set it from
    /// their top-level seed, so it is not serialized.
    #[serde(skip)]
    pub seed: u64,
    /// Clamp the multiplicative correction on `a` in the input step to
    /// `[0, 1]`. Off gives the unmodified recursion.
    pub bounded_correction: bool,
}

impl Default for GampConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            convergence_tol: 3e-4,
            damping: 0.1,
            variance_floor: 1e-12,
            seed: 0,
            bounded_correction: true,
        }
    }
}

impl GampConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::Config(format!(
                "convergence tolerance must be positive, got {}",
                self.convergence_tol
            )));
        }
        if !(self.variance_floor > 0.0 && self.variance_floor.is_finite()) {
            return Err(Error::Config(format!(
                "variance floor must be positive, got {}",
                self.variance_floor
            )));
        }
        Ok(())
    }
}

/// Outcome of one sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepReport {
    /// `||Z(t) - Z(t-1)||_F / ||Z(t-1)||_F` on the CP reconstruction from the
    /// factor means.
    pub relative_change: f64,
    pub converged: bool,
    /// Factor entries whose input-variance denominator was zero this sweep.
    pub uninformative_entries: usize,
}

/// Input-side moments of every factor entry.
#[derive(Debug, Clone, PartialEq)]
pub struct InputMoments {
    pub q_mean: Vec<Matrix>,
    pub q_var: Vec<Matrix>,
    /// Entries that fell back to the uninformative variance `1 / floor`.
    pub uninformative: usize,
}

/// Full message state of the engine.
#[derive(Debug, Clone, PartialEq)]
pub struct GampState {
    pub factors: FactorState,
    pub p_mean: DenseTensor,
    pub p_var: DenseTensor,
    pub z_mean: DenseTensor,
    pub z_var: DenseTensor,
    pub s_mean: DenseTensor,
    pub s_var: DenseTensor,
    pub q_mean: Vec<Matrix>,
    pub q_var: Vec<Matrix>,
    /// Posterior support probabilities from the last denoising step.
    pub support_probs: Vec<Matrix>,
    pub iteration: usize,
}

impl GampState {
    /// Starts from `factors`; residuals are zero and `z_mean` holds the CP
    /// estimate of the initial factors.
    pub fn new(factors: FactorState, variance_floor: f64) -> Self {
        let (p_mean, p_var) = compute_output_moments(&factors, variance_floor);
        let shape = p_mean.shape().clone();
        let q_var = factors
            .means()
            .iter()
            .map(|m| Matrix::filled(m.rows(), m.cols(), 1.0 / variance_floor))
            .collect();
        let support_probs = factors
            .means()
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            q_mean: factors.means().to_vec(),
            q_var,
            support_probs,
            z_mean: p_mean.clone(),
            z_var: p_var.clone(),
            p_mean,
            p_var,
            s_mean: DenseTensor::zeros(shape.clone()),
            s_var: DenseTensor::zeros(shape),
            factors,
            iteration: 0,
        }
    }

    /// CP reconstruction from the current factor means.
    pub fn reconstruction(&self) -> DenseTensor {
        crate::tensor::kruskal_full(&self.factors)
    }

    pub fn rank(&self) -> usize {
        self.factors.rank()
    }

    /// Keeps only the listed factor columns.
    pub fn retain_columns(&mut self, keep: &[usize]) {
        self.factors = self.factors.select_columns(keep);
        self.q_mean = self.q_mean.iter().map(|m| m.select_columns(keep)).collect();
        self.q_var = self.q_var.iter().map(|m| m.select_columns(keep)).collect();
        self.support_probs = self
            .support_probs
            .iter()
            .map(|m| m.select_columns(keep))
            .collect();
    }

    /// Name of the first field holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        let tensors: [(&'static str, &DenseTensor); 6] = [
            ("p_mean", &self.p_mean),
            ("p_var", &self.p_var),
            ("z_mean", &self.z_mean),
            ("z_var", &self.z_var),
            ("s_mean", &self.s_mean),
            ("s_var", &self.s_var),
        ];
        for (name, t) in tensors {
            if !t.is_finite() {
                return Some(name);
            }
        }
        let mats: [(&'static str, &[Matrix]); 5] = [
            ("q_mean", &self.q_mean),
            ("q_var", &self.q_var),
            ("factor means", self.factors.means()),
            ("factor variances", self.factors.variances()),
            ("support_probs", &self.support_probs),
        ];
        for (name, ms) in mats {
            if ms
                .iter()
                .any(|m| m.as_slice().iter().any(|v| !v.is_finite()))
            {
                return Some(name);
            }
        }
        None
    }
}

/// Random start: means i.i.d. `N(0, 1)`, variances 1 (the prior slab).
pub fn initialize_factors(dims: &[usize], rank: usize, seed: u64) -> Result<FactorState> {
    if rank == 0 {
        return Err(Error::Domain("rank must be at least 1".into()));
    }
    Shape::new(dims.to_vec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let means = dims
        .iter()
        .map(|&d| {
            let data = (0..d * rank).map(|_| rng.sample(StandardNormal)).collect();
            Matrix::from_vec(d, rank, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let variances = dims.iter().map(|&d| Matrix::filled(d, rank, 1.0)).collect();
    FactorState::new(means, variances)
}

/// Per-entry CP mean `p_mean = <a rows>` and variance
/// `p_var = <(v + a^2) rows> - <a^2 rows>`, floored at `variance_floor`.
pub fn compute_output_moments(
    factors: &FactorState,
    variance_floor: f64,
) -> (DenseTensor, DenseTensor) {
    let shape = factors.shape();
    let mut p_mean = DenseTensor::zeros(shape.clone());
    let mut p_var = DenseTensor::zeros(shape);
    output_moments_into(factors, variance_floor, &mut p_mean, &mut p_var);
    (p_mean, p_var)
}

fn output_moments_into(
    factors: &FactorState,
    variance_floor: f64,
    p_mean: &mut DenseTensor,
    p_var: &mut DenseTensor,
) {
    let dims = factors.dims();
    let rank = factors.rank();
    let means = factors.means();
    let vars = factors.variances();
    let mut prod = vec![0.0; rank];
    let mut second = vec![0.0; rank];
    let mut square = vec![0.0; rank];
    let mut idx = vec![0; dims.len()];
    let pm = p_mean.values_mut();
    let pv = p_var.values_mut();
    for k in 0..pm.len() {
        prod.fill(1.0);
        second.fill(1.0);
        square.fill(1.0);
        for (mode, &i) in idx.iter().enumerate() {
            let a_row = means[mode].row(i);
            let v_row = vars[mode].row(i);
            for r in 0..rank {
                let a = a_row[r];
                let a2 = a * a;
                prod[r] *= a;
                second[r] *= v_row[r] + a2;
                square[r] *= a2;
            }
        }
        pm[k] = prod.iter().sum();
        let var: f64 = second.iter().zip(&square).map(|(m, s)| m - s).sum();
        pv[k] = var.max(variance_floor);
        advance(&mut idx, &dims);
    }
}

/// Scaled residuals `s_mean = (z_mean - p_mean) / p_var` and
/// `s_var = (1 - z_var / p_var) / p_var`, the latter clamped at zero.
pub fn compute_residuals(
    z_mean: &DenseTensor,
    z_var: &DenseTensor,
    p_mean: &DenseTensor,
    p_var: &DenseTensor,
) -> Result<(DenseTensor, DenseTensor)> {
    z_var.ensure_same_shape(z_mean, "z_var")?;
    p_mean.ensure_same_shape(z_mean, "p_mean")?;
    p_var.ensure_same_shape(z_mean, "p_var")?;
    if let Some(k) = p_var.values().iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Domain(format!(
            "p_var entry {k} is {}, must be positive",
            p_var.values()[k]
        )));
    }
    let mut s_mean = DenseTensor::zeros(z_mean.shape().clone());
    let mut s_var = DenseTensor::zeros(z_mean.shape().clone());
    residuals_into(z_mean, z_var, p_mean, p_var, &mut s_mean, &mut s_var);
    Ok((s_mean, s_var))
}

fn residuals_into(
    z_mean: &DenseTensor,
    z_var: &DenseTensor,
    p_mean: &DenseTensor,
    p_var: &DenseTensor,
    s_mean: &mut DenseTensor,
    s_var: &mut DenseTensor,
) {
    let (zm, zv, pm, pv) = (
        z_mean.values(),
        z_var.values(),
        p_mean.values(),
        p_var.values(),
    );
    let sm = s_mean.values_mut();
    for k in 0..sm.len() {
        sm[k] = (zm[k] - pm[k]) / pv[k];
    }
    let sv = s_var.values_mut();
    for k in 0..sv.len() {
        sv[k] = ((1.0 - zv[k] / pv[k]) / pv[k]).max(0.0);
    }
}

/// Product of the other modes' means in column `column` at `idx`, and the
/// variance of that product: `prod_{l != mode} (v + a^2) - prod_{l != mode} a^2`.
pub fn leave_one_mode_moments(
    factors: &FactorState,
    idx: &MultiIndex,
    mode: usize,
    column: usize,
) -> Result<(f64, f64)> {
    let coords = idx.as_slice();
    let dims = factors.dims();
    if coords.len() != dims.len() {
        return Err(Error::Bounds(format!(
            "index has {} coordinates, factors have {} modes",
            coords.len(),
            dims.len()
        )));
    }
    if let Some(n) = (0..dims.len()).find(|&n| coords[n] >= dims[n]) {
        return Err(Error::Bounds(format!(
            "coordinate {} of mode {} exceeds dimension {}",
            coords[n] + 1,
            n + 1,
            dims[n]
        )));
    }
    if mode >= dims.len() || column >= factors.rank() {
        return Err(Error::Bounds(format!(
            "mode {} / column {} out of range",
            mode + 1,
            column + 1
        )));
    }
    let mut prod = 1.0;
    let mut second = 1.0;
    let mut square = 1.0;
    for (l, &i) in coords.iter().enumerate() {
        if l == mode {
            continue;
        }
        let a = factors.mean(l).get(i, column);
        let v = factors.variance(l).get(i, column);
        prod *= a;
        second *= v + a * a;
        square *= a * a;
    }
    Ok((prod, second - square))
}

/// Aggregates, for every factor entry `(mode, row, column)`, the residuals of
/// all tensor entries sharing that row:
///
/// `q_var = 1 / sum(a_prod^2 * s_var)` and
/// `q_mean = a * (1 + q_var * sum(a_var * (s_mean^2 - s_var))) + q_var * sum(a_prod * s_mean)`.
///
/// A zero denominator yields the uninformative variance `1 / variance_floor`.
pub fn compute_input_moments(
    factors: &FactorState,
    s_mean: &DenseTensor,
    s_var: &DenseTensor,
    variance_floor: f64,
) -> Result<InputMoments> {
    let shape = factors.shape();
    if s_mean.shape() != &shape || s_var.shape() != &shape {
        return Err(Error::Dimension(format!(
            "residual shape {} does not match factor shape {shape}",
            s_mean.shape()
        )));
    }
    let mut out = InputMoments {
        q_mean: factors.means().to_vec(),
        q_var: factors.variances().to_vec(),
        uninformative: 0,
    };
    let mut sums = InputSums::new(factors);
    out.uninformative = input_moments_into(
        factors,
        s_mean,
        s_var,
        variance_floor,
        false,
        &mut sums,
        &mut out.q_mean,
        &mut out.q_var,
    );
    Ok(out)
}

/// Scratch accumulators for the three row sums of the input step.
struct InputSums {
    precision: Vec<Vec<f64>>,
    correction: Vec<Vec<f64>>,
    residual: Vec<Vec<f64>>,
}

impl InputSums {
    fn new(factors: &FactorState) -> Self {
        let zeros: Vec<Vec<f64>> = factors
            .means()
            .iter()
            .map(|m| vec![0.0; m.rows() * m.cols()])
            .collect();
        Self {
            precision: zeros.clone(),
            correction: zeros.clone(),
            residual: zeros,
        }
    }

    fn clear(&mut self) {
        for v in self
            .precision
            .iter_mut()
            .chain(&mut self.correction)
            .chain(&mut self.residual)
        {
            v.fill(0.0);
        }
    }
}

fn input_moments_into(
    factors: &FactorState,
    s_mean: &DenseTensor,
    s_var: &DenseTensor,
    variance_floor: f64,
    bounded: bool,
    sums: &mut InputSums,
    q_mean: &mut [Matrix],
    q_var: &mut [Matrix],
) -> usize {
    let dims = factors.dims();
    let order = dims.len();
    let rank = factors.rank();
    let means = factors.means();
    let vars = factors.variances();
    sums.clear();

    let mut mean_prod = vec![0.0; rank];
    let mut second_prod = vec![0.0; rank];
    let mut square_prod = vec![0.0; rank];
    let mut idx = vec![0; order];
    let sm = s_mean.values();
    let sv = s_var.values();
    for k in 0..sm.len() {
        let s = sm[k];
        let vs = sv[k];
        // Entries with zero residual and zero residual variance (unobserved
        // ones in particular) add nothing to any sum.
        if s != 0.0 || vs != 0.0 {
            let centered = s * s - vs;
            mean_prod.fill(1.0);
            second_prod.fill(1.0);
            square_prod.fill(1.0);
            for (mode, &i) in idx.iter().enumerate() {
                let a_row = means[mode].row(i);
                let v_row = vars[mode].row(i);
                for r in 0..rank {
                    let a = a_row[r];
                    let a2 = a * a;
                    mean_prod[r] *= a;
                    second_prod[r] *= v_row[r] + a2;
                    square_prod[r] *= a2;
                }
            }
            for (mode, &i) in idx.iter().enumerate() {
                let a_row = means[mode].row(i);
                let v_row = vars[mode].row(i);
                let off = i * rank;
                let precision = &mut sums.precision[mode][off..off + rank];
                let correction = &mut sums.correction[mode][off..off + rank];
                let residual = &mut sums.residual[mode][off..off + rank];
                for r in 0..rank {
                    let a = a_row[r];
                    let (a_prod, a_var) = if a.abs() >= ZERO_MEAN_GUARD {
                        let a2 = a * a;
                        (
                            mean_prod[r] / a,
                            second_prod[r] / (v_row[r] + a2) - square_prod[r] / a2,
                        )
                    } else {
                        leave_one_out_direct(means, vars, &idx, mode, r)
                    };
                    precision[r] += a_prod * a_prod * vs;
                    correction[r] += a_var * centered;
                    residual[r] += a_prod * s;
                }
            }
        }
        advance(&mut idx, &dims);
    }

    let mut uninformative = 0;
    for mode in 0..order {
        let qm = q_mean[mode].as_mut_slice();
        let qv = q_var[mode].as_mut_slice();
        let a = means[mode].as_slice();
        for j in 0..qm.len() {
            let denom = sums.precision[mode][j];
            let var = if denom > 0.0 {
                (1.0 / denom).max(variance_floor)
            } else {
                uninformative += 1;
                1.0 / variance_floor
            };
            qv[j] = var;
            let mut scale = 1.0 + var * sums.correction[mode][j];
            if bounded {
                scale = scale.clamp(0.0, 1.0);
            }
            qm[j] = a[j] * scale + var * sums.residual[mode][j];
        }
    }
    uninformative
}

fn leave_one_out_direct(
    means: &[Matrix],
    vars: &[Matrix],
    idx: &[usize],
    mode: usize,
    column: usize,
) -> (f64, f64) {
    let mut prod = 1.0;
    let mut second = 1.0;
    let mut square = 1.0;
    for (l, &i) in idx.iter().enumerate() {
        if l != mode {
            let a = means[l].get(i, column);
            prod *= a;
            second *= vars[l].get(i, column) + a * a;
            square *= a * a;
        }
    }
    (prod, second - square)
}

/// Denoises every factor entry and blends the result with the previous
/// estimate: `new = damping * denoised + (1 - damping) * old`.
pub fn update_factors(
    factors: &FactorState,
    q_mean: &[Matrix],
    q_var: &[Matrix],
    prior: &BGPrior,
    damping: f64,
) -> Result<(FactorState, Vec<Matrix>)> {
    if prior.rank() != factors.rank() {
        return Err(Error::Dimension(format!(
            "prior has {} columns, factors have {}",
            prior.rank(),
            factors.rank()
        )));
    }
    if q_mean.len() != factors.order() || q_var.len() != factors.order() {
        return Err(Error::Dimension(
            "input moments do not match factor modes".into(),
        ));
    }
    for (n, (qm, qv)) in q_mean.iter().zip(q_var).enumerate() {
        let (rows, cols) = (factors.mean(n).rows(), factors.rank());
        if qm.rows() != rows || qm.cols() != cols || qv.rows() != rows || qv.cols() != cols {
            return Err(Error::Dimension(format!(
                "input moments of mode {} have the wrong size",
                n + 1
            )));
        }
        if let Some(k) = qv.as_slice().iter().position(|&v| !(v > 0.0)) {
            return Err(Error::Domain(format!(
                "q_var entry {k} of mode {} is not positive",
                n + 1
            )));
        }
    }
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(Error::Domain(format!(
            "damping must lie in (0, 1], got {damping}"
        )));
    }
    let mut next = factors.clone();
    let mut support: Vec<Matrix> = factors
        .means()
        .iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect();
    denoise_into(&mut next, q_mean, q_var, prior, damping, &mut support);
    Ok((next, support))
}

fn denoise_into(
    factors: &mut FactorState,
    q_mean: &[Matrix],
    q_var: &[Matrix],
    prior: &BGPrior,
    damping: f64,
    support: &mut [Matrix],
) {
    let rank = factors.rank();
    let lambdas = prior.lambdas();
    let (means, vars) = factors.parts_mut();
    for mode in 0..means.len() {
        let qm = q_mean[mode].as_slice();
        let qv = q_var[mode].as_slice();
        let am = means[mode].as_mut_slice();
        let av = vars[mode].as_mut_slice();
        let pi = support[mode].as_mut_slice();
        for j in 0..am.len() {
            let d = denoise_unchecked(qm[j], qv[j], lambdas[j % rank]);
            if damping == 1.0 {
                am[j] = d.mean;
                av[j] = d.variance;
            } else {
                am[j] = damping * d.mean + (1.0 - damping) * am[j];
                av[j] = damping * d.variance + (1.0 - damping) * av[j];
            }
            pi[j] = d.support_prob;
        }
    }
}

/// Runs one CP-GAMP iteration in place.
pub fn sweep(
    state: &mut GampState,
    obs: &ObservationModel,
    prior: &BGPrior,
    config: &GampConfig,
) -> Result<SweepReport> {
    config.validate()?;
    let shape = state.factors.shape();
    if obs.y().shape() != &shape {
        return Err(Error::Dimension(format!(
            "observation shape {} does not match factor shape {shape}",
            obs.y().shape()
        )));
    }
    if prior.rank() != state.factors.rank() {
        return Err(Error::Dimension(format!(
            "prior has {} columns, factors have {}",
            prior.rank(),
            state.factors.rank()
        )));
    }
    let floor = config.variance_floor;

    output_moments_into(&state.factors, floor, &mut state.p_mean, &mut state.p_var);
    let previous = state.p_mean.clone();
    apply_channel_into(
        obs,
        state.p_mean.values(),
        state.p_var.values(),
        &mut state.z_mean,
        &mut state.z_var,
    );
    residuals_into(
        &state.z_mean,
        &state.z_var,
        &state.p_mean,
        &state.p_var,
        &mut state.s_mean,
        &mut state.s_var,
    );
    if state.q_mean.len() != state.factors.order() || state.q_mean[0].cols() != state.factors.rank()
    {
        state.q_mean = state.factors.means().to_vec();
        state.q_var = state.factors.variances().to_vec();
        state.support_probs = state.factors.variances().to_vec();
    }
    let mut sums = InputSums::new(&state.factors);
    let uninformative = input_moments_into(
        &state.factors,
        &state.s_mean,
        &state.s_var,
        floor,
        config.bounded_correction,
        &mut sums,
        &mut state.q_mean,
        &mut state.q_var,
    );
    denoise_into(
        &mut state.factors,
        &state.q_mean,
        &state.q_var,
        prior,
        config.damping,
        &mut state.support_probs,
    );
    state.iteration += 1;

    let relative_change = relative_change(&state.reconstruction(), &previous);
    Ok(SweepReport {
        relative_change,
        converged: relative_change < config.convergence_tol,
        uninformative_entries: uninformative,
    })
}

/// `||current - previous||_F / ||previous||_F`; zero when both vanish.
pub fn relative_change(current: &DenseTensor, previous: &DenseTensor) -> f64 {
    let mut diff = 0.0;
    let mut base = 0.0;
    for (c, p) in current.values().iter().zip(previous.values()) {
        diff += (c - p) * (c - p);
        base += p * p;
    }
    if base == 0.0 {
        return if diff == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (diff / base).sqrt()
}

/// Repeats [`sweep`] until the relative change of the reconstruction drops below the
/// tolerance or `max_iterations` sweeps have run.
pub fn run(
    obs: &ObservationModel,
    prior: &BGPrior,
    config: &GampConfig,
    init: FactorState,
) -> Result<(GampState, usize)> {
    run_with(obs, prior, config, init, |_, _| {})
}

/// [`run`] with a callback invoked after every sweep.
pub fn run_with(
    obs: &ObservationModel,
    prior: &BGPrior,
    config: &GampConfig,
    init: FactorState,
    mut on_sweep: impl FnMut(&GampState, &SweepReport),
) -> Result<(GampState, usize)> {
    config.validate()?;
    let mut state = GampState::new(init, config.variance_floor);
    for _ in 0..config.max_iterations {
        let report = sweep(&mut state, obs, prior, config)?;
        check_finite(&state)?;
        on_sweep(&state, &report);
        if report.converged {
            break;
        }
    }
    let count = state.iteration;
    Ok((state, count))
}

pub(crate) fn check_finite(state: &GampState) -> Result<()> {
    match state.first_non_finite() {
        Some(field) => Err(Error::Divergence {
            iteration: state.iteration,
            field: field.to_string(),
        }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state_2mode(a1: f64, v1: f64, a2: f64, v2: f64) -> FactorState {
        FactorState::new(
            vec![Matrix::filled(1, 1, a1), Matrix::filled(1, 1, a2)],
            vec![Matrix::filled(1, 1, v1), Matrix::filled(1, 1, v2)],
        )
        .unwrap()
    }

    #[test]
    fn output_moments_single_entry() {
        let f = state_2mode(2.0, 0.5, 3.0, 0.25);
        let (pm, pv) = compute_output_moments(&f, 1e-12);
        assert_eq!(pm.values(), &[6.0]);
        assert!((pv.values()[0] - 5.625).abs() < 1e-14);
    }

    #[test]
    fn zero_variance_factors_hit_the_floor() {
        let f = initialize_factors(&[3, 2, 2], 2, 5).unwrap();
        let f = FactorState::from_means(f.means().to_vec()).unwrap();
        let (pm, pv) = compute_output_moments(&f, 1e-12);
        assert_eq!(pm, crate::tensor::kruskal_full(&f));
        assert!(pv.values().iter().all(|&v| v == 1e-12));
    }

    #[test]
    fn residual_examples() {
        let s = Shape::new(vec![1, 3]).unwrap();
        let t = |v: Vec<f64>| DenseTensor::from_vec(s.clone(), v).unwrap();
        let (sm, sv) = compute_residuals(
            &t(vec![1.5, 2.0, 4.0]),
            &t(vec![0.3, 0.25, 0.0]),
            &t(vec![1.5, 1.0, -7.0]),
            &t(vec![0.3, 0.5, 0.8]),
        )
        .unwrap();
        assert_eq!(sm.values()[0], 0.0);
        assert_eq!(sv.values()[0], 0.0);
        assert_eq!(sm.values()[1], 2.0);
        assert_eq!(sv.values()[1], 1.0);
        assert_eq!(sv.values()[2], 1.0 / 0.8);
    }

    #[test]
    fn residual_variance_clamped() {
        let s = Shape::new(vec![1, 1]).unwrap();
        let t = |v: f64| DenseTensor::from_vec(s.clone(), vec![v]).unwrap();
        let (_, sv) = compute_residuals(&t(0.0), &t(2.0), &t(0.0), &t(1.0)).unwrap();
        assert_eq!(sv.values()[0], 0.0);
        assert!(compute_residuals(&t(0.0), &t(2.0), &t(0.0), &t(0.0)).is_err());
    }

    #[test]
    fn leave_one_out_examples() {
        let f = state_2mode(2.0, 0.5, 3.0, 0.25);
        let idx = MultiIndex::new(vec![0, 0]);
        assert_eq!(leave_one_mode_moments(&f, &idx, 0, 0).unwrap(), (3.0, 0.25));
        assert_eq!(leave_one_mode_moments(&f, &idx, 1, 0).unwrap(), (2.0, 0.5));

        let f3 = FactorState::new(
            vec![
                Matrix::filled(1, 1, 9.0),
                Matrix::filled(1, 1, 2.0),
                Matrix::filled(1, 1, 3.0),
            ],
            vec![
                Matrix::filled(1, 1, 4.0),
                Matrix::filled(1, 1, 0.5),
                Matrix::filled(1, 1, 0.25),
            ],
        )
        .unwrap();
        let idx3 = MultiIndex::new(vec![0, 0, 0]);
        let (p, v) = leave_one_mode_moments(&f3, &idx3, 0, 0).unwrap();
        assert_eq!(p, 6.0);
        assert!((v - 5.625).abs() < 1e-14);

        let zero_var = FactorState::from_means(f3.means().to_vec()).unwrap();
        assert_eq!(
            leave_one_mode_moments(&zero_var, &idx3, 1, 0).unwrap().1,
            0.0
        );
        assert!(leave_one_mode_moments(&f3, &MultiIndex::new(vec![1, 0, 0]), 0, 0).is_err());
    }

    #[test]
    fn input_moments_single_summand() {
        let c = 0.7;
        let f = state_2mode(1.3, 0.2, 2.0, 0.0);
        let s = Shape::new(vec![1, 1]).unwrap();
        let sm = DenseTensor::zeros(s.clone());
        let sv = DenseTensor::filled(s, c);
        let im = compute_input_moments(&f, &sm, &sv, 1e-12).unwrap();
        assert!((im.q_var[0].get(0, 0) - 1.0 / (4.0 * c)).abs() < 1e-15);
        // The correction sum is a_var * (0 - c) with a_var = 0 for mode 0.
        assert_eq!(im.q_mean[0].get(0, 0), 1.3);
        assert_eq!(im.uninformative, 0);
    }

    #[test]
    fn input_moments_uninformative_branch() {
        let f = initialize_factors(&[2, 3], 2, 1).unwrap();
        let s = f.shape();
        let zero = DenseTensor::zeros(s);
        let im = compute_input_moments(&f, &zero, &zero, 1e-12).unwrap();
        assert_eq!(im.uninformative, 10);
        for m in &im.q_var {
            assert!(m.as_slice().iter().all(|&v| v == 1e12));
        }
        assert_eq!(im.q_mean, f.means().to_vec());
    }

    #[test]
    fn zero_mean_guard_matches_direct_product() {
        let mut f = initialize_factors(&[3, 3, 3], 2, 9).unwrap();
        let (means, _) = f.parts_mut();
        means[1].set(1, 0, 0.0);
        means[2].set(0, 1, 1e-10);
        let shape = f.shape();
        let sm = DenseTensor::from_fn(shape.clone(), |i| (i[0] + 2 * i[1]) as f64 * 0.1 - 0.3);
        let sv = DenseTensor::from_fn(shape, |i| 0.2 + 0.05 * (i[2] as f64));
        let fast = compute_input_moments(&f, &sm, &sv, 1e-12).unwrap();
        for mode in 0..3 {
            for row in 0..3 {
                for r in 0..2 {
                    let (mut p, mut c, mut s) = (0.0, 0.0, 0.0);
                    for idx in f.shape().indices() {
                        if idx.as_slice()[mode] != row {
                            continue;
                        }
                        let (ap, av) = leave_one_mode_moments(&f, &idx, mode, r).unwrap();
                        let k = crate::tensor::flat_offset(&f.shape(), &idx).unwrap();
                        let (m, v) = (sm.values()[k], sv.values()[k]);
                        p += ap * ap * v;
                        c += av * (m * m - v);
                        s += ap * m;
                    }
                    let qv = 1.0 / p;
                    let a = f.mean(mode).get(row, r);
                    let qm = a * (1.0 + qv * c) + qv * s;
                    let got = fast.q_mean[mode].get(row, r);
                    assert!(
                        (got - qm).abs() <= 1e-10 * qm.abs().max(1.0),
                        "{got} vs {qm}"
                    );
                    assert!((fast.q_var[mode].get(row, r) - qv).abs() <= 1e-10 * qv);
                }
            }
        }
    }

    #[test]
    fn update_factors_examples() {
        let f = initialize_factors(&[2, 2], 1, 3).unwrap();
        let zeros = vec![Matrix::zeros(2, 1); 2];
        let ones = vec![Matrix::filled(2, 1, 1.0); 2];
        let prior = BGPrior::uniform(1, 0.5);
        let (next, _) = update_factors(&f, &zeros, &ones, &prior, 1.0).unwrap();
        assert!(next
            .means()
            .iter()
            .all(|m| m.as_slice().iter().all(|&a| a == 0.0)));

        let old = FactorState::new(
            vec![Matrix::filled(1, 1, 1.0); 2],
            vec![Matrix::filled(1, 1, 0.0); 2],
        )
        .unwrap();
        let (next, _) = update_factors(
            &old,
            &[Matrix::zeros(1, 1), Matrix::zeros(1, 1)],
            &[Matrix::filled(1, 1, 1.0), Matrix::filled(1, 1, 1.0)],
            &prior,
            0.5,
        )
        .unwrap();
        assert_eq!(next.mean(0).get(0, 0), 0.5);
        assert!(update_factors(&old, &zeros, &ones, &BGPrior::uniform(2, 0.5), 1.0).is_err());
    }

    #[test]
    fn relative_change_edge_cases() {
        let s = Shape::new(vec![1, 2]).unwrap();
        let z = DenseTensor::zeros(s.clone());
        let one = DenseTensor::filled(s, 1.0);
        assert_eq!(relative_change(&z, &z), 0.0);
        assert_eq!(relative_change(&one, &z), f64::INFINITY);
        assert_eq!(relative_change(&z, &one), 1.0);
    }
}
