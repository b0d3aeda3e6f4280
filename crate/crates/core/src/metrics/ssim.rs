//! Multi-scale structural similarity.

use crate::error::{Error, Result};

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn gaussian() -> [f64; WINDOW] {
    let mut g = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable "valid" Gaussian filter of one `h x w` plane.
fn filter(x: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..WINDOW).map(|k| g[k] * x[y * w + x0 + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..WINDOW).map(|k| g[k] * rows[(y0 + k) * ow + x0]).sum();
        }
    }
    out
}

/// Mean SSIM and mean contrast-structure term of two planes.
fn ssim_cs(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> (f64, f64) {
    let g = gaussian();
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let ma = filter(a, h, w, &g);
    let mb = filter(b, h, w, &g);
    let aa = filter(&prod(a, a), h, w, &g);
    let bb = filter(&prod(b, b), h, w, &g);
    let ab = filter(&prod(a, b), h, w, &g);
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..ma.len() {
        let (mu_a, mu_b) = (ma[i], mb[i]);
        let va = aa[i] - mu_a * mu_a;
        let vb = bb[i] - mu_b * mu_b;
        let cov = ab[i] - mu_a * mu_b;
        let c = (2.0 * cov + c2) / (va + vb + c2);
        let l = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1);
        ssim += l * c;
        cs += c;
    }
    let n = ma.len() as f64;
    (ssim / n, cs / n)
}

fn pool2(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x0 in 0..ow {
            let i = 2 * y * w + 2 * x0;
            out[y * ow + x0] = 0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]);
        }
    }
    out
}

/// MS-SSIM of two interleaved `h x w x c` images with dynamic range
/// `range`. Channels are scored separately and averaged per scale; negative
/// per-scale terms are clamped to zero.
pub fn ms_ssim_with(a: &[f32], b: &[f32], h: usize, w: usize, c: usize, n_scales: usize, range: f64) -> Result<f64> {
    if a.len() != h * w * c || b.len() != a.len() {
        return Err(Error::Shape(format!("images must both be {h}x{w}x{c}")));
    }
    if n_scales == 0 || n_scales > WEIGHTS.len() {
        return Err(Error::Argument(format!("n_scales must be in 1..=5, got {n_scales}")));
    }
    let need = WINDOW << (n_scales - 1);
    if h < need || w < need {
        return Err(Error::Argument(format!("{h}x{w} image too small for {n_scales} scales (needs {need})")));
    }
    let wsum: f64 = WEIGHTS[..n_scales].iter().sum();
    let plane = |x: &[f32], ch: usize| -> Vec<f64> { (0..h * w).map(|i| x[i * c + ch] as f64).collect() };
    let mut pa: Vec<Vec<f64>> = (0..c).map(|ch| plane(a, ch)).collect();
    let mut pb: Vec<Vec<f64>> = (0..c).map(|ch| plane(b, ch)).collect();
    let (mut hh, mut ww) = (h, w);
    let mut out = 1.0;
    for s in 0..n_scales {
        let (mut ssim, mut cs) = (0.0, 0.0);
        for ch in 0..c {
            let (x, y) = ssim_cs(&pa[ch], &pb[ch], hh, ww, range);
            ssim += x;
            cs += y;
        }
        let term = if s + 1 == n_scales { ssim } else { cs } / c as f64;
        out *= term.max(0.0).powf(WEIGHTS[s] / wsum);
        if s + 1 < n_scales {
            for ch in 0..c {
                pa[ch] = pool2(&pa[ch], hh, ww);
                pb[ch] = pool2(&pb[ch], hh, ww);
            }
            hh /= 2;
            ww /= 2;
        }
    }
    Ok(out)
}

/// [`ms_ssim_with`] for `[0, 1]` images.
pub fn ms_ssim(a: &[f32], b: &[f32], h: usize, w: usize, c: usize, n_scales: usize) -> Result<f64> {
    ms_ssim_with(a, b, h, w, c, n_scales, 1.0)
}

/// Mean MS-SSIM over all unordered pairs of a group.
pub fn mean_pairwise(images: &[Vec<f32>], h: usize, w: usize, c: usize, n_scales: usize) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::Argument("need at least two images for pairwise similarity".into()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            sum += ms_ssim(&images[i], &images[j], h, w, c, n_scales)?;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}
