//! Per-token cross-attention atlases averaged over layers and noise levels.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::model::Model;
use crate::error::{Error, Result};
use crate::imaging::{bilinear_resize, RgbImage};
use crate::text::TokenSeq;

/// Noise levels used for real images.
pub const DEFAULT_LEVELS: usize = 8;

/// Attention probabilities of one layer for one sample and timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct RawAttentionRecord {
    pub layer_index: usize,
    pub height: usize,
    pub width: usize,
    pub t_max: usize,
    pub timestep: usize,
    /// Position of the sample within its batch.
    pub sample: usize,
    /// `(height * width) x t_max`, rows sum to one.
    pub probs: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtlasMeta {
    pub n_layers: usize,
    pub noise_levels: Vec<usize>,
    pub caption: String,
    pub token_ids: Vec<u32>,
    pub word_spans: Vec<[usize; 2]>,
    pub words: Vec<String>,
    pub n_real: usize,
    /// Maps averaged into the atlas.
    pub n_maps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionAtlas {
    pub t_max: usize,
    pub z: usize,
    /// Token-major `t_max x z x z`.
    pub maps: Vec<f32>,
    pub meta: AtlasMeta,
}

impl AttentionAtlas {
    pub fn token_map(&self, token: usize) -> &[f32] {
        let n = self.z * self.z;
        &self.maps[token * n..(token + 1) * n]
    }

    /// Sum over tokens at each pixel.
    pub fn token_sums(&self) -> Vec<f64> {
        let n = self.z * self.z;
        (0..n).map(|i| (0..self.t_max).map(|t| self.maps[t * n + i] as f64).sum()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(16 + 4 * self.maps.len());
        for v in [self.t_max, self.z, self.meta.noise_levels.len(), self.meta.n_layers] {
            bytes.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.maps {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let side = sidecar(path);
        let json = serde_json::to_string_pretty(&self.meta).expect("meta serialises");
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 {
            return Err(Error::parse(path.display().to_string(), "truncated atlas header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let (t_max, z, s, d) = (word(0), word(1), word(2), word(3));
        let n = t_max * z * z;
        if bytes.len() != 16 + 4 * n {
            return Err(Error::parse(path.display().to_string(), format!("expected {n} map values")));
        }
        let maps = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let side = sidecar(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: AtlasMeta = serde_json::from_str(&text).map_err(|e| Error::parse(side.display().to_string(), e))?;
        if meta.noise_levels.len() != s || meta.n_layers != d {
            return Err(Error::parse(path.display().to_string(), "header disagrees with sidecar"));
        }
        Ok(Self { t_max, z, maps, meta })
    }
}

/// `atlas.bin` -> `atlas.json`.
pub fn sidecar(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

/// Bilinearly resizes a `(h*w) x t_max` attention map to `z x z x t_max`.
pub fn resize_map(probs: &[f32], h: usize, w: usize, t_max: usize, z: usize) -> Result<Vec<f32>> {
    let dyadic = |s: usize| s > 0 && s <= z && z % s == 0 && (z / s).is_power_of_two();
    if !dyadic(h) || !dyadic(w) {
        return Err(Error::Shape(format!("{h}x{w} map cannot be resized to {z}x{z} by a dyadic factor")));
    }
    if probs.len() != h * w * t_max {
        return Err(Error::Shape(format!("map has {} values, expected {}", probs.len(), h * w * t_max)));
    }
    Ok(bilinear_resize(probs, h, w, t_max, z, z))
}

/// Uniform mean of resized records, token-major. Records are summed in a
/// canonical (timestep, layer, sample) order so any input permutation gives
/// identical bits.
pub fn aggregate(records: &[RawAttentionRecord], z: usize) -> Result<Vec<f32>> {
    let Some(first) = records.first() else {
        return Err(Error::Argument("no attention records to aggregate".into()));
    };
    let t_max = first.t_max;
    let mut order: Vec<&RawAttentionRecord> = records.iter().collect();
    order.sort_by_key(|r| (r.timestep, r.layer_index, r.sample));
    let mut acc = vec![0.0f64; z * z * t_max];
    for r in order {
        if r.t_max != t_max {
            return Err(Error::Shape("records disagree on t_max".into()));
        }
        let m = resize_map(&r.probs, r.height, r.width, t_max, z)?;
        for (a, v) in acc.iter_mut().zip(m) {
            *a += v as f64;
        }
    }
    let n = records.len() as f64;
    let pixels = z * z;
    let mut maps = vec![0.0f32; t_max * pixels];
    for p in 0..pixels {
        for t in 0..t_max {
            maps[t * pixels + p] = (acc[p * t_max + t] / n) as f32;
        }
    }
    Ok(maps)
}

/// Noise levels spread uniformly over `[0.1 T, 0.6 T]`.
pub fn default_noise_levels(steps: usize, k: usize) -> Vec<usize> {
    let (lo, hi) = (0.1 * steps as f64, 0.6 * steps as f64);
    if k == 1 {
        return vec![lo.round() as usize];
    }
    (0..k).map(|i| (lo + (hi - lo) * i as f64 / (k - 1) as f64).round() as usize).collect()
}

/// Seed for the forward-noising draw of `(image_id, t)`.
pub fn noise_seed(image_id: &str, t: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(image_id.as_bytes());
    h.update((t as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn meta_for(model: &Model, caption: &str, seq: &TokenSeq, levels: Vec<usize>, n_maps: usize) -> AtlasMeta {
    AtlasMeta {
        n_layers: model.attention_layers(),
        noise_levels: levels,
        caption: caption.to_string(),
        token_ids: seq.ids.clone(),
        word_spans: seq.word_spans.iter().map(|r| [r.start, r.end]).collect(),
        words: seq.words.clone(),
        n_real: seq.n_real,
        n_maps,
    }
}

/// Atlas of a real image: forward-noise its latent to each level with
/// seeded noise and record one denoiser pass per level.
pub fn extract_atlas(model: &Model, image: &RgbImage, image_id: &str, caption: &str, noise_levels: &[usize]) -> Result<AttentionAtlas> {
    let seq = model.tokenize(caption)?;
    let cond = model.conditioning(&[&seq])?;
    extract_atlas_with(model, image, image_id, &seq, &cond, caption, noise_levels)
}

/// [`extract_atlas`] with a precomputed tokenization and conditioning.
pub fn extract_atlas_with(
    model: &Model,
    image: &RgbImage,
    image_id: &str,
    seq: &TokenSeq,
    cond: &[f32],
    caption: &str,
    noise_levels: &[usize],
) -> Result<AttentionAtlas> {
    if noise_levels.is_empty() {
        return Err(Error::Argument("noise_levels is empty".into()));
    }
    let x0 = model.config.latent.encode(image)?;
    let mut xs = Vec::with_capacity(x0.len() * noise_levels.len());
    let mut conds = Vec::with_capacity(cond.len() * noise_levels.len());
    for &t in noise_levels {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(image_id, t));
        let eps: Vec<f32> = (0..x0.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        xs.extend(model.schedule().q_sample(&x0, t, &eps)?);
        conds.extend_from_slice(cond);
    }
    let mut records = Vec::new();
    model.predict_eps(&xs, noise_levels, &conds, Some(&mut records))?;
    let maps = aggregate(&records, model.z())?;
    Ok(AttentionAtlas {
        t_max: model.t_max(),
        z: model.z(),
        maps,
        meta: meta_for(model, caption, seq, noise_levels.to_vec(), records.len()),
    })
}

/// Samples an image and averages the conditional-branch attention of every
/// denoising step. Returns the decoded `[0, 1]` image and the atlas.
pub fn atlas_for_sampling(model: &Model, prompt: &str, n_steps: usize, scale: f32, seed: u64) -> Result<(Vec<f32>, AttentionAtlas)> {
    let seq = model.tokenize(prompt)?;
    let mut records = Vec::new();
    let lat = model.sample_latents(&[prompt], &[seed], n_steps, scale, Some(&mut records))?;
    let image = model.config.latent.decode(&lat)?;
    let maps = aggregate(&records, model.z())?;
    let levels = model.schedule().sampling_timesteps(n_steps)?;
    let atlas = AttentionAtlas { t_max: model.t_max(), z: model.z(), maps, meta: meta_for(model, prompt, &seq, levels, records.len()) };
    Ok((image, atlas))
}
