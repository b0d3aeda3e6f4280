//! Fixed, parameter-free image <-> latent transform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{bilinear_resize, RgbImage};

/// Area-average downsampling by `factor` with values mapped to [-1, 1];
/// decoding upsamples bilinearly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentTransform {
    pub image_size: usize,
    pub factor: usize,
}

pub const LATENT_CHANNELS: usize = 3;

impl Default for LatentTransform {
    fn default() -> Self {
        Self { image_size: 64, factor: 4 }
    }
}

impl LatentTransform {
    pub fn side(&self) -> usize {
        self.image_size / self.factor
    }

    pub fn len(&self) -> usize {
        self.side() * self.side() * LATENT_CHANNELS
    }

    pub fn encode(&self, img: &RgbImage) -> Result<Vec<f32>> {
        if img.width != self.image_size || img.height != self.image_size {
            return Err(Error::Shape(format!(
                "image is {}x{}, latent transform expects {}x{}",
                img.width, img.height, self.image_size, self.image_size
            )));
        }
        let (z, f) = (self.side(), self.factor);
        let mut out = vec![0.0f32; self.len()];
        for ly in 0..z {
            for lx in 0..z {
                for c in 0..LATENT_CHANNELS {
                    let mut acc = 0u32;
                    for y in ly * f..(ly + 1) * f {
                        for x in lx * f..(lx + 1) * f {
                            acc += img.data[(y * self.image_size + x) * 3 + c] as u32;
                        }
                    }
                    let mean = acc as f64 / (255.0 * (f * f) as f64);
                    out[(ly * z + lx) * LATENT_CHANNELS + c] = (2.0 * mean - 1.0) as f32;
                }
            }
        }
        Ok(out)
    }

    /// Decodes to `[0, 1]` values, interleaved RGB at image resolution.
    pub fn decode(&self, latent: &[f32]) -> Result<Vec<f32>> {
        if latent.len() != self.len() {
            return Err(Error::Shape(format!("latent has {} values, expected {}", latent.len(), self.len())));
        }
        let z = self.side();
        let up = bilinear_resize(latent, z, z, LATENT_CHANNELS, self.image_size, self.image_size);
        Ok(up.into_iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect())
    }

    pub fn decode_image(&self, latent: &[f32]) -> Result<RgbImage> {
        let px = self.decode(latent)?;
        Ok(RgbImage::from_unit(self.image_size, self.image_size, &px))
    }
}

/// PSNR in dB between two `[0, 1]` signals.
pub fn psnr(a: &[f32], b: &[f32]) -> f64 {
    let mse = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}
