//! Masked AWGN observation channel.
//!
//! An entry is either observed through additive white Gaussian noise of
//! power `v^w`, or missing. Given the Gaussian pseudo-prior `N(p_mean, p_var)`
//! on the noiseless entry, the channel returns the posterior mean and
//! variance of that entry. Missing entries pass the pseudo-prior through
//! unchanged.

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Lower bound applied to incoming pseudo-prior variances.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Observed values `Y`, binary mask `O` and noise power `v^w`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    y: DenseTensor,
    mask: DenseTensor,
    noise_power: f64,
    observed_count: usize,
}

impl ObservationModel {
    /// Values of `y` at unobserved positions are replaced by 0.
    pub fn new(mut y: DenseTensor, mask: DenseTensor, noise_power: f64) -> Result<Self> {
        y.ensure_same_shape(&mask, "observation mask")?;
        if let Some(k) = mask.values().iter().position(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Domain(format!(
                "mask entry {k} is {}, expected 0 or 1",
                mask.values()[k]
            )));
        }
        check_noise_power(noise_power)?;
        if !y.is_finite() {
            return Err(Error::Domain(
                "observed tensor contains non-finite values".into(),
            ));
        }
        let mut observed_count = 0;
        for (v, &m) in y.values_mut().iter_mut().zip(mask.values()) {
            if m == 1.0 {
                observed_count += 1;
            } else {
                *v = 0.0;
            }
        }
        Ok(Self {
            y,
            mask,
            noise_power,
            observed_count,
        })
    }

    /// Every entry observed.
    pub fn fully_observed(y: DenseTensor, noise_power: f64) -> Result<Self> {
        let mask = DenseTensor::filled(y.shape().clone(), 1.0);
        Self::new(y, mask, noise_power)
    }

    pub fn y(&self) -> &DenseTensor {
        &self.y
    }

    pub fn mask(&self) -> &DenseTensor {
        &self.mask
    }

    pub fn noise_power(&self) -> f64 {
        self.noise_power
    }

    pub fn set_noise_power(&mut self, noise_power: f64) -> Result<()> {
        check_noise_power(noise_power)?;
        self.noise_power = noise_power;
        Ok(())
    }

    pub fn observed_count(&self) -> usize {
        self.observed_count
    }

    #[inline]
    pub fn is_observed(&self, offset: usize) -> bool {
        self.mask.values()[offset] == 1.0
    }
}

fn check_noise_power(noise_power: f64) -> Result<()> {
    if !(noise_power > 0.0 && noise_power.is_finite()) {
        return Err(Error::Domain(format!(
            "noise power must be positive and finite, got {noise_power}"
        )));
    }
    Ok(())
}

/// Posterior moments of `z` for every entry.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputMoments {
    pub z_mean: DenseTensor,
    pub z_var: DenseTensor,
}

/// Posterior `(mean, variance)` of one entry under pseudo-prior
/// `N(p_mean, p_var)`. Observed entries combine prior and measurement by
/// precision weighting; unobserved entries return the prior unchanged.
pub fn z_posterior_moments(
    p_mean: f64,
    p_var: f64,
    y: f64,
    observed: bool,
    noise_power: f64,
) -> Result<(f64, f64)> {
    if !(p_var > 0.0) {
        return Err(Error::Domain(format!(
            "p_var must be positive, got {p_var}"
        )));
    }
    check_noise_power(noise_power)?;
    Ok(channel_moments(p_mean, p_var, y, observed, noise_power))
}

#[inline]
pub(crate) fn channel_moments(
    p_mean: f64,
    p_var: f64,
    y: f64,
    observed: bool,
    noise_power: f64,
) -> (f64, f64) {
    if !observed {
        return (p_mean, p_var);
    }
    let p_var = p_var.max(VARIANCE_FLOOR);
    let z_mean = (y * p_var + p_mean * noise_power) / (p_var + noise_power);
    let z_var = 1.0 / (1.0 / p_var + 1.0 / noise_power);
    (z_mean, z_var)
}

/// Applies [`z_posterior_moments`] entry-wise.
pub fn apply_channel(
    model: &ObservationModel,
    p_mean: &DenseTensor,
    p_var: &DenseTensor,
) -> Result<OutputMoments> {
    p_mean.ensure_same_shape(&model.y, "p_mean")?;
    p_var.ensure_same_shape(&model.y, "p_var")?;
    if let Some(k) = p_var.values().iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Domain(format!(
            "p_var entry {k} is {}, must be positive",
            p_var.values()[k]
        )));
    }
    let mut z_mean = p_mean.clone();
    let mut z_var = p_var.clone();
    apply_channel_into(
        model,
        p_mean.values(),
        p_var.values(),
        &mut z_mean,
        &mut z_var,
    );
    Ok(OutputMoments { z_mean, z_var })
}

pub(crate) fn apply_channel_into(
    model: &ObservationModel,
    p_mean: &[f64],
    p_var: &[f64],
    z_mean: &mut DenseTensor,
    z_var: &mut DenseTensor,
) {
    let nw = model.noise_power;
    let y = model.y.values();
    let mask = model.mask.values();
    for k in 0..p_mean.len() {
        let (m, v) = channel_moments(p_mean[k], p_var[k], y[k], mask[k] == 1.0, nw);
        z_mean.values_mut()[k] = m;
        z_var.values_mut()[k] = v;
    }
}
