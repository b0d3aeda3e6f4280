//! Sample-level checks: diversity and conditional-generation probing.

use super::localization::auc_roc;
use super::probe::ProbeClassifier;
use super::ssim::mean_pairwise;
use crate::corpus::EMPTY_CAPTION;
use crate::diffusion::latent::LATENT_CHANNELS;
use crate::diffusion::model::Model;
use crate::error::{Error, Result};

/// Sampling settings shared by the generative checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingOptions {
    pub n_steps: usize,
    pub guidance: f32,
    pub seed: u64,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self { n_steps: 75, guidance: 4.0, seed: 0 }
    }
}

/// `n` decoded `[0, 1]` images of one prompt with seeds `seed, seed+1, ...`.
pub fn generate(model: &Model, prompt: &str, n: usize, opts: &SamplingOptions) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(n);
    let mut next = opts.seed;
    while out.len() < n {
        let k = (n - out.len()).min(16);
        let prompts = vec![prompt; k];
        let seeds: Vec<u64> = (0..k as u64).map(|i| next + i).collect();
        next += k as u64;
        let lat = model.sample_latents(&prompts, &seeds, opts.n_steps, opts.guidance, None)?;
        for l in lat.chunks(model.config.latent.len()) {
            out.push(model.config.latent.decode(l)?);
        }
    }
    Ok(out)
}

/// Mean pairwise MS-SSIM within groups of `group_size` samples per prompt,
/// averaged over prompts. Lower is more diverse.
pub fn diversity(model: &Model, prompts: &[String], group_size: usize, n_scales: usize, opts: &SamplingOptions) -> Result<f64> {
    if prompts.is_empty() || group_size < 2 {
        return Err(Error::Argument("diversity needs prompts and a group size of at least 2".into()));
    }
    let side = model.config.latent.image_size;
    let mut sum = 0.0;
    for (i, p) in prompts.iter().enumerate() {
        let o = SamplingOptions { seed: opts.seed + (i * group_size) as u64, ..*opts };
        let imgs = generate(model, p, group_size, &o)?;
        sum += mean_pairwise(&imgs, side, side, LATENT_CHANNELS, n_scales)?;
    }
    Ok(sum / prompts.len() as f64)
}

/// For each class, AUC of the probe's class score on generations from the
/// class prompt against generations from the empty-scene prompt.
pub fn generation_probe_auc(
    model: &Model,
    probe: &ProbeClassifier,
    prompts: &[(String, String)],
    n_per_prompt: usize,
    opts: &SamplingOptions,
) -> Result<Vec<(String, f64)>> {
    let null_imgs = generate(model, EMPTY_CAPTION, n_per_prompt, opts)?;
    let null_scores = probe.predict(&null_imgs)?;
    let mut out = Vec::new();
    for (i, (class, prompt)) in prompts.iter().enumerate() {
        let Some(k) = probe.class_index(class) else {
            out.push((class.clone(), f64::NAN));
            continue;
        };
        let o = SamplingOptions { seed: opts.seed + 1_000_003 * (i as u64 + 1), ..*opts };
        let imgs = generate(model, prompt, n_per_prompt, &o)?;
        let pos = probe.predict(&imgs)?;
        let scores: Vec<f32> = pos.iter().chain(&null_scores).map(|r| r[k]).collect();
        let labels: Vec<bool> = (0..scores.len()).map(|j| j < pos.len()).collect();
        out.push((class.clone(), auc_roc(&scores, &labels)?));
    }
    Ok(out)
}
