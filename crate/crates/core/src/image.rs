//! Image inpainting: RGB images as `H x W x 3` tensors, corruption, and
//! reconstruction through adaptive CP-GAMP.
//!
//! Pixels are standardized per channel before inference so that the tensor
//! sits near the unit-slab prior; [`ImageTensor::to_pixels`] undoes this.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::em::{adaptive_run_with, AdaptiveOutcome, EMConfig, IterationRecord, RankEstimate};
use crate::error::{Error, Result};
use crate::gamp::{GampConfig, GampState};
use crate::observation::ObservationModel;
use crate::synthetic::{corrupt_tensor, nmse_db, psnr_db};
use crate::tensor::{DenseTensor, Shape};

/// Peak value of 8-bit pixels.
pub const PIXEL_PEAK: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// A standardized RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub tensor: DenseTensor,
    pub channel_stats: [ChannelStats; 3],
    pub peak: f64,
}

impl ImageTensor {
    /// Builds from interleaved 8-bit RGB pixels in row-major order.
    pub fn from_rgb8(height: usize, width: usize, pixels: &[u8]) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Input(format!(
                "expected {} bytes for a {height}x{width} RGB image, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        let shape = Shape::new(vec![height, width, 3])?;
        let count = (height * width) as f64;
        let mut stats = [ChannelStats {
            mean: 0.0,
            std: 1.0,
        }; 3];
        for (c, st) in stats.iter_mut().enumerate() {
            let channel = pixels.iter().skip(c).step_by(3).map(|&p| p as f64);
            let mean = channel.clone().sum::<f64>() / count;
            let var = channel.map(|p| (p - mean) * (p - mean)).sum::<f64>() / count;
            let std = var.sqrt();
            *st = ChannelStats {
                mean,
                std: if std > 0.0 { std } else { 1.0 },
            };
        }
        let values = pixels
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                let st = stats[k % 3];
                (p as f64 - st.mean) / st.std
            })
            .collect();
        Ok(Self {
            tensor: DenseTensor::from_vec(shape, values)?,
            channel_stats: stats,
            peak: PIXEL_PEAK,
        })
    }

    /// Same statistics, different standardized content.
    pub fn with_tensor(&self, tensor: DenseTensor) -> Result<Self> {
        tensor.ensure_same_shape(&self.tensor, "image")?;
        Ok(Self {
            tensor,
            channel_stats: self.channel_stats,
            peak: self.peak,
        })
    }

    pub fn height(&self) -> usize {
        self.tensor.shape().dims()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape().dims()[1]
    }

    /// Undoes the standardization and clamps to `[0, peak]`.
    pub fn to_pixels(&self) -> DenseTensor {
        let mut out = self.tensor.clone();
        for (k, v) in out.values_mut().iter_mut().enumerate() {
            let st = self.channel_stats[k % 3];
            *v = (*v * st.std + st.mean).clamp(0.0, self.peak);
        }
        out
    }

    /// Pixels rounded to 8 bits.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.to_pixels()
            .values()
            .iter()
            .map(|v| v.round() as u8)
            .collect()
    }
}

/// Loads an 8-bit RGB PNG or binary PPM.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| Error::Input(format!("cannot read image {}: {e}", path.display())))?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(Error::Input(format!(
                "{} is not 8-bit RGB (found {:?})",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = rgb.dimensions();
    ImageTensor::from_rgb8(h as usize, w as usize, rgb.as_raw())
}

/// Writes the image as 8-bit RGB: binary PPM for `.ppm`/`.pnm`, otherwise
/// the format follows the file extension.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::ImageEncoder;

    let err =
        |e: image::ImageError| Error::Input(format!("cannot write image {}: {e}", path.display()));
    let (w, h) = (img.width() as u32, img.height() as u32);
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    if matches!(ext.as_deref(), Some("ppm" | "pnm")) {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        PnmEncoder::new(file)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(&img.to_rgb8(), w, h, image::ExtendedColorType::Rgb8)
            .map_err(err)
    } else {
        image::save_buffer(path, &img.to_rgb8(), w, h, image::ExtendedColorType::Rgb8).map_err(err)
    }
}

/// Masks and noises the standardized image. Returns the observation and the
/// clean standardized tensor.
pub fn corrupt(
    img: &ImageTensor,
    observation_ratio: f64,
    snr_db: f64,
    seed: u64,
) -> Result<(ObservationModel, DenseTensor)> {
    let (obs, _) = corrupt_tensor(&img.tensor, observation_ratio, snr_db, seed)?;
    Ok((obs, img.tensor.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintMetrics {
    /// On the standardized scale, before clamping.
    pub nmse_db: f64,
    /// On the pixel scale after clamping, peak 255.
    pub psnr_db: f64,
    pub estimated_rank: usize,
    pub runtime_seconds: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct InpaintResult {
    pub reconstruction: ImageTensor,
    pub rank: RankEstimate,
    pub metrics: InpaintMetrics,
    pub outcome: AdaptiveOutcome,
}

/// Reconstructs `truth` from `obs` and scores the result.
pub fn inpaint(
    obs: &ObservationModel,
    truth: &ImageTensor,
    gamp_config: &GampConfig,
    em_config: &EMConfig,
    initial_rank: usize,
) -> Result<InpaintResult> {
    inpaint_with(obs, truth, gamp_config, em_config, initial_rank, |_, _| {})
}

/// [`inpaint`] with a callback after every iteration.
pub fn inpaint_with(
    obs: &ObservationModel,
    truth: &ImageTensor,
    gamp_config: &GampConfig,
    em_config: &EMConfig,
    initial_rank: usize,
    on_iteration: impl FnMut(&IterationRecord, &GampState),
) -> Result<InpaintResult> {
    obs.y().ensure_same_shape(&truth.tensor, "observation")?;
    let start = Instant::now();
    let outcome = adaptive_run_with(obs, gamp_config, em_config, initial_rank, on_iteration)?;
    let runtime_seconds = start.elapsed().as_secs_f64();

    let reconstruction = truth.with_tensor(outcome.state.reconstruction())?;
    let nmse = nmse_db(&reconstruction.tensor, &truth.tensor)?;
    let psnr = psnr_db(&reconstruction.to_pixels(), &truth.to_pixels(), PIXEL_PEAK)?;
    Ok(InpaintResult {
        metrics: InpaintMetrics {
            nmse_db: nmse,
            psnr_db: psnr,
            estimated_rank: outcome.rank.estimated_rank,
            runtime_seconds,
            iterations: outcome.iterations,
        },
        rank: outcome.rank.clone(),
        reconstruction,
        outcome,
    })
}
