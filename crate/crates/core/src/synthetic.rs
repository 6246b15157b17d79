//! Seeded synthetic CP problems and reconstruction metrics.
//!
//! Every random quantity is drawn from a ChaCha8 generator seeded with the
//! problem seed, on its own stream:
//!
//! | stream | content                                  |
//! |--------|------------------------------------------|
//! | 1      | ground-truth factor entries, `N(0, 1)`   |
//! | 2      | noise, one draw per entry in row-major order |
//! | 3      | mask, partial Fisher-Yates over offsets  |
//! | 4      | engine initialization (see `gamp`)       |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::observation::ObservationModel;
use crate::tensor::{kruskal_full, DenseTensor, FactorState, Matrix, Shape};

pub const FACTOR_STREAM: u64 = 1;
pub const NOISE_STREAM: u64 = 2;
pub const MASK_STREAM: u64 = 3;

/// Smallest noise power ever produced (also used for noiseless problems).
pub const MIN_NOISE_POWER: f64 = 1e-12;

/// Returned by [`nmse_db`] for an exact match and by [`psnr_db`] for zero error.
pub const METRIC_SENTINEL_DB: f64 = 320.0;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub shape: Vec<usize>,
    pub true_rank: usize,
    /// `+inf` means noiseless; serialized as the string `"inf"`.
    #[serde(serialize_with = "ser_snr", deserialize_with = "de_snr")]
    pub snr_db: f64,
    pub observation_ratio: f64,
    pub seed: u64,
}

pub(crate) fn ser_snr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

pub(crate) fn de_snr<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Snr {
        Num(f64),
        Text(String),
    }
    match Snr::deserialize(d)? {
        Snr::Num(v) => Ok(v),
        Snr::Text(t) => match t.trim().to_ascii_lowercase().as_str() {
            "inf" | "+inf" | "infinity" | "noiseless" => Ok(f64::INFINITY),
            other => Err(serde::de::Error::custom(format!(
                "invalid snr_db `{other}`"
            ))),
        },
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<Shape> {
        let shape = Shape::new(self.shape.clone())?;
        if self.true_rank == 0 {
            return Err(Error::Domain("true rank must be at least 1".into()));
        }
        if !(self.observation_ratio > 0.0 && self.observation_ratio <= 1.0) {
            return Err(Error::Domain(format!(
                "observation ratio must lie in (0, 1], got {}",
                self.observation_ratio
            )));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::Domain(format!("invalid SNR {}", self.snr_db)));
        }
        Ok(shape)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticProblem {
    pub ground_truth: DenseTensor,
    pub observation: ObservationModel,
    pub true_factors: FactorState,
    pub true_noise_power: f64,
}

/// Unbiased sample variance of the entries.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
}

/// Noise power giving the requested SNR against `signal_variance`.
pub fn noise_power_for_snr(signal_variance: f64, snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        return MIN_NOISE_POWER;
    }
    (signal_variance / 10f64.powf(snr_db / 10.0)).max(MIN_NOISE_POWER)
}

/// Number of observed entries for a ratio: `round(ratio * count)`.
pub fn observed_count(ratio: f64, element_count: usize) -> usize {
    (ratio * element_count as f64).round() as usize
}

/// Binary mask with exactly `observed` ones placed uniformly at random.
pub fn sample_mask(shape: &Shape, observed: usize, seed: u64) -> DenseTensor {
    let total = shape.element_count();
    let observed = observed.min(total);
    let mut rng = stream_rng(seed, MASK_STREAM);
    let mut order: Vec<usize> = (0..total).collect();
    for i in 0..observed {
        let j = rng.random_range(i..total);
        order.swap(i, j);
    }
    let mut mask = DenseTensor::zeros(shape.clone());
    for &k in &order[..observed] {
        mask.values_mut()[k] = 1.0;
    }
    mask
}

/// i.i.d. `N(0, noise_power)` noise for every entry.
pub fn sample_noise(shape: &Shape, noise_power: f64, seed: u64) -> DenseTensor {
    let mut rng = stream_rng(seed, NOISE_STREAM);
    let sd = noise_power.sqrt();
    let values = (0..shape.element_count())
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    DenseTensor::from_vec(shape.clone(), values).expect("length matches shape")
}

/// Adds noise at `snr_db` (relative to the sample variance of `truth`) and
/// masks all but `round(ratio * count)` entries. Returns the observation and
/// the noise power used.
pub fn corrupt_tensor(
    truth: &DenseTensor,
    observation_ratio: f64,
    snr_db: f64,
    seed: u64,
) -> Result<(ObservationModel, f64)> {
    if !(observation_ratio > 0.0 && observation_ratio <= 1.0) {
        return Err(Error::Domain(format!(
            "observation ratio must lie in (0, 1], got {observation_ratio}"
        )));
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::Domain(format!("invalid SNR {snr_db}")));
    }
    let shape = truth.shape();
    let observed = observed_count(observation_ratio, shape.element_count());
    if observed == 0 {
        return Err(Error::Domain(format!(
            "observation ratio {observation_ratio} leaves no observed entries"
        )));
    }
    let noise_power = noise_power_for_snr(sample_variance(truth.values()), snr_db);
    let noiseless = snr_db == f64::INFINITY;
    let noise = sample_noise(shape, noise_power, seed);
    let mask = sample_mask(shape, observed, seed);
    let mut y = truth.clone();
    for ((yv, w), m) in y
        .values_mut()
        .iter_mut()
        .zip(noise.values())
        .zip(mask.values())
    {
        if *m == 0.0 {
            *yv = 0.0;
        } else if !noiseless {
            *yv += w;
        }
    }
    Ok((ObservationModel::new(y, mask, noise_power)?, noise_power))
}

/// Generates a CP problem: standard normal factors, their Kruskal tensor,
/// AWGN at the requested SNR and a uniformly random mask.
pub fn generate_problem(spec: &SyntheticSpec) -> Result<SyntheticProblem> {
    let shape = spec.validate()?;
    let mut rng = stream_rng(spec.seed, FACTOR_STREAM);
    let means = shape
        .dims()
        .iter()
        .map(|&d| {
            let data = (0..d * spec.true_rank)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            Matrix::from_vec(d, spec.true_rank, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let true_factors = FactorState::from_means(means)?;
    let ground_truth = kruskal_full(&true_factors);
    let (observation, true_noise_power) = corrupt_tensor(
        &ground_truth,
        spec.observation_ratio,
        spec.snr_db,
        spec.seed,
    )?;
    Ok(SyntheticProblem {
        ground_truth,
        observation,
        true_factors,
        true_noise_power,
    })
}

/// `20 log10(||estimate - truth||_F / ||truth||_F)`.
pub fn nmse_db(estimate: &DenseTensor, truth: &DenseTensor) -> Result<f64> {
    estimate.ensure_same_shape(truth, "nmse")?;
    let norm = truth.frobenius_norm();
    if norm == 0.0 {
        return Err(Error::Domain("NMSE undefined for an all-zero truth".into()));
    }
    let err = estimate
        .values()
        .iter()
        .zip(truth.values())
        .map(|(e, t)| (e - t) * (e - t))
        .sum::<f64>()
        .sqrt();
    if err == 0.0 {
        return Ok(-METRIC_SENTINEL_DB);
    }
    Ok(20.0 * (err / norm).log10())
}

/// `10 log10(peak^2 / mse)`.
pub fn psnr_db(estimate: &DenseTensor, truth: &DenseTensor, peak: f64) -> Result<f64> {
    estimate.ensure_same_shape(truth, "psnr")?;
    if !(peak > 0.0) {
        return Err(Error::Domain(format!("peak must be positive, got {peak}")));
    }
    let mse = estimate
        .values()
        .iter()
        .zip(truth.values())
        .map(|(e, t)| (e - t) * (e - t))
        .sum::<f64>()
        / truth.values().len() as f64;
    if mse == 0.0 {
        return Ok(METRIC_SENTINEL_DB);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}
