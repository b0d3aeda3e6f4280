//! Figure-style heatmap overlays.

use std::path::Path;

use groundiff::imaging::{bilinear_resize, Mask, RgbImage};

use crate::error::{BenchError, Result};

/// Grayscale image with the heatmap as a red overlay (alpha proportional to
/// heatmap / max) and the mask boundary in white. The `z x z` heatmap is
/// bilinearly upsampled to image size; the mask is at image resolution.
pub fn overlay_image(image: &RgbImage, heatmap: &[f32], z: usize, mask: &Mask) -> Result<RgbImage> {
    let (w, h) = (image.width, image.height);
    if heatmap.len() != z * z || mask.width != w || mask.height != h {
        return Err(BenchError::Config("overlay inputs disagree in size".into()));
    }
    let up = bilinear_resize(heatmap, z, z, 1, h, w);
    let max = up.iter().cloned().fold(0.0f32, f32::max);
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = image.pixel(x, y);
            let gray = (0.299 * r as f32 + 0.587 * g as f32 + 0.114 * b as f32).round();
            let a = if max > 0.0 { (up[y * w + x] / max).clamp(0.0, 1.0) } else { 0.0 };
            let edge = mask.get(x, y)
                && [(0i64, -1i64), (0, 1), (-1, 0), (1, 0)].iter().any(|(dx, dy)| {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 || !mask.get(nx as usize, ny as usize)
                });
            let px = if edge {
                [255, 255, 255]
            } else {
                let red = gray * (1.0 - a) + 255.0 * a;
                let other = (gray * (1.0 - a)).round() as u8;
                [red.round() as u8, other, other]
            };
            out.set_pixel(x, y, px);
        }
    }
    Ok(out)
}

pub fn render_overlay(image: &RgbImage, heatmap: &[f32], z: usize, mask: &Mask, out: &Path) -> Result<()> {
    overlay_image(image, heatmap, z, mask)?.save_png(out)?;
    Ok(())
}
