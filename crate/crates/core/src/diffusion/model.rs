//! Denoiser + text encoder bundle with inference entry points.

use groundiff_nn::{Graph, ParamSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::latent::{LatentTransform, LATENT_CHANNELS};
use super::schedule::NoiseSchedule;
use super::unet::{UNet, UNetConfig};
use crate::atlas::RawAttentionRecord;
use crate::error::{Error, Result};
use crate::text::{TextEncoder, TextEncoderConfig, TokenSeq, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub encoder: TextEncoderConfig,
    pub schedule: NoiseSchedule,
    pub latent: LatentTransform,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            unet: UNetConfig::default(),
            encoder: TextEncoderConfig::new(vocab_size),
            schedule: NoiseSchedule::default(),
            latent: LatentTransform::default(),
        }
    }
}

/// Everything needed to run the model: layouts, parameters and vocabulary.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub unet: UNet,
    pub unet_params: ParamSet<f32>,
    pub encoder: TextEncoder,
    pub encoder_params: ParamSet<f32>,
    pub vocab: Vocabulary,
}

/// `eps_uncond + scale * (eps_cond - eps_uncond)`.
pub fn cfg_predict(eps_cond: &[f32], eps_uncond: &[f32], scale: f32) -> Vec<f32> {
    assert_eq!(eps_cond.len(), eps_uncond.len(), "guidance inputs differ in length");
    eps_cond.iter().zip(eps_uncond).map(|(&c, &u)| u + scale * (c - u)).collect()
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if config.encoder.vocab_size != vocab.len() {
            return Err(Error::Argument(format!(
                "encoder vocabulary size {} does not match vocabulary of {}",
                config.encoder.vocab_size,
                vocab.len()
            )));
        }
        if config.unet.cond_dim != config.encoder.d_model {
            return Err(Error::Argument("denoiser cond_dim must equal encoder d_model".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (encoder, encoder_params) = TextEncoder::new(config.encoder.clone(), &mut rng);
        let (unet, unet_params) = UNet::new(config.unet.clone(), &mut rng);
        let config = ModelConfig { schedule: config.schedule.rebuilt(), ..config };
        Ok(Self { config, unet, unet_params, encoder, encoder_params, vocab })
    }

    pub fn t_max(&self) -> usize {
        self.config.encoder.t_max
    }

    pub fn z(&self) -> usize {
        self.config.latent.side()
    }

    /// Number of cross-attention layers.
    pub fn attention_layers(&self) -> usize {
        self.unet.attention_layers()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.config.schedule
    }

    pub fn tokenize(&self, caption: &str) -> Result<TokenSeq> {
        self.vocab.tokenize(caption, self.t_max())
    }

    /// Encoder output for a batch, `n * t_max * d` values.
    pub fn conditioning(&self, seqs: &[&TokenSeq]) -> Result<Vec<f32>> {
        let mut g = Graph::<f32>::new();
        let p = self.encoder_params.bind(&mut g, false);
        let out = self.encoder.forward(&mut g, &p, seqs)?;
        Ok(g.value(out).to_vec())
    }

    /// Learned null conditioning tiled over `n` samples.
    pub fn null_conditioning(&self, n: usize) -> Vec<f32> {
        let row = &self.unet_params.get(self.unet.null_token).data;
        let per = self.t_max() * row.len();
        let mut out = Vec::with_capacity(n * per);
        for _ in 0..n * self.t_max() {
            out.extend_from_slice(row);
        }
        out
    }

    /// Noise prediction for a batch. With `record`, every cross-attention
    /// layer appends one record per sample.
    pub fn predict_eps(
        &self,
        x_t: &[f32],
        t: &[usize],
        cond: &[f32],
        record: Option<&mut Vec<RawAttentionRecord>>,
    ) -> Result<Vec<f32>> {
        let n = t.len();
        let z = self.z();
        let per_latent = z * z * LATENT_CHANNELS;
        let d = self.config.unet.cond_dim;
        let tm = self.t_max();
        if x_t.len() != n * per_latent {
            return Err(Error::Shape(format!("x_t has {} values, expected {}", x_t.len(), n * per_latent)));
        }
        if cond.len() != n * tm * d {
            return Err(Error::Shape(format!("conditioning has {} values, expected {}", cond.len(), n * tm * d)));
        }
        if let Some(&bad) = t.iter().find(|&&ti| ti >= self.schedule().steps) {
            return Err(Error::Argument(format!("timestep {bad} outside [0, {})", self.schedule().steps)));
        }
        let mut g = Graph::<f32>::new();
        let p = self.unet_params.bind(&mut g, false);
        let x = g.constant(x_t.to_vec(), &[n, z, z, LATENT_CHANNELS]);
        let c = g.constant(cond.to_vec(), &[n, tm, d]);
        let (eps, taps) = self.unet.forward(&mut g, &p, x, t, c);
        if let Some(rec) = record {
            for tap in &taps {
                let probs = g.value(tap.probs);
                let per = tap.height * tap.width * tm;
                for (i, &ti) in t.iter().enumerate() {
                    rec.push(RawAttentionRecord {
                        layer_index: tap.layer,
                        height: tap.height,
                        width: tap.width,
                        t_max: tm,
                        timestep: ti,
                        sample: i,
                        probs: probs[i * per..(i + 1) * per].to_vec(),
                    });
                }
            }
        }
        Ok(g.value(eps).to_vec())
    }

    /// Classifier-free guided prediction. The conditional and unconditional
    /// passes share one batch; only conditional attention is recorded.
    pub fn guided_eps(
        &self,
        x_t: &[f32],
        t: &[usize],
        cond: &[f32],
        scale: f32,
        record: Option<&mut Vec<RawAttentionRecord>>,
    ) -> Result<Vec<f32>> {
        let n = t.len();
        let mut x2 = x_t.to_vec();
        x2.extend_from_slice(x_t);
        let mut t2 = t.to_vec();
        t2.extend_from_slice(t);
        let mut c2 = cond.to_vec();
        c2.extend(self.null_conditioning(n));
        let mut scratch = Vec::new();
        let eps = self.predict_eps(&x2, &t2, &c2, record.is_some().then_some(&mut scratch))?;
        if let Some(rec) = record {
            rec.extend(scratch.into_iter().filter(|r| r.sample < n));
        }
        let half = eps.len() / 2;
        Ok(cfg_predict(&eps[..half], &eps[half..], scale))
    }

    /// Ancestral sampling of several prompts in one batch; each prompt uses
    /// its own seed. Returns latents, `n * z * z * 3` values.
    pub fn sample_latents(
        &self,
        prompts: &[&str],
        seeds: &[u64],
        n_steps: usize,
        scale: f32,
        mut record: Option<&mut Vec<RawAttentionRecord>>,
    ) -> Result<Vec<f32>> {
        if prompts.len() != seeds.len() {
            return Err(Error::Argument("one seed per prompt".into()));
        }
        if scale < 0.0 {
            return Err(Error::Argument(format!("guidance scale {scale} must be >= 0")));
        }
        let seqs: Vec<TokenSeq> = prompts.iter().map(|p| self.tokenize(p)).collect::<Result<_>>()?;
        let refs: Vec<&TokenSeq> = seqs.iter().collect();
        let cond = self.conditioning(&refs)?;
        let ts = self.schedule().sampling_timesteps(n_steps)?;
        let per = self.config.latent.len();
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        let mut x: Vec<f32> = Vec::with_capacity(prompts.len() * per);
        for rng in rngs.iter_mut() {
            x.extend((0..per).map(|_| -> f32 { StandardNormal.sample(rng) }));
        }
        for (k, &t) in ts.iter().enumerate() {
            let t_prev = ts.get(k + 1).copied();
            let tb = vec![t; prompts.len()];
            let eps = self.guided_eps(&x, &tb, &cond, scale, record.as_deref_mut())?;
            let mut next = Vec::with_capacity(x.len());
            for (i, rng) in rngs.iter_mut().enumerate() {
                let noise: Vec<f32> = match t_prev {
                    Some(_) => (0..per).map(|_| -> f32 { StandardNormal.sample(rng) }).collect(),
                    None => Vec::new(),
                };
                let r = i * per..(i + 1) * per;
                next.extend(self.schedule().step(&x[r.clone()], &eps[r], t, t_prev, &noise));
            }
            x = next;
        }
        Ok(x)
    }

    /// Samples one image, decoded to `[0, 1]` RGB at image resolution.
    pub fn sample(&self, prompt: &str, n_steps: usize, scale: f32, seed: u64) -> Result<Vec<f32>> {
        let lat = self.sample_latents(&[prompt], &[seed], n_steps, scale, None)?;
        self.config.latent.decode(&lat)
    }
}
