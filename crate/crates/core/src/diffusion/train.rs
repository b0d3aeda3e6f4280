//! Denoiser training with unconditional-guidance dropout.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::Path;

use groundiff_nn::{Adam, Graph, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::latent::LATENT_CHANNELS;
use super::model::Model;
use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::text::{EncoderMode, TokenSeq};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    /// Probability of replacing the caption of an empty scene by the null
    /// conditioning.
    pub uncond_drop_prob: f64,
    pub encoder_mode: EncoderMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_mode(EncoderMode::Learnable)
    }
}

impl TrainConfig {
    /// Defaults with the step budget of the given mode (frozen runs get half).
    pub fn for_mode(mode: EncoderMode) -> Self {
        Self {
            batch_size: 32,
            steps: match mode {
                EncoderMode::Frozen => 10_000,
                EncoderMode::Learnable => 20_000,
            },
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            uncond_drop_prob: 0.30,
            encoder_mode: mode,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Argument("steps and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.uncond_drop_prob) {
            return Err(Error::Argument(format!("uncond_drop_prob {} outside [0, 1]", self.uncond_drop_prob)));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Argument("learning rate must be positive and moments in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Pre-encoded training set.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub ids: Vec<String>,
    pub latents: Vec<f32>,
    pub seqs: Vec<TokenSeq>,
    pub empty: Vec<bool>,
    /// Captions rejected by the tokenizer (too long).
    pub skipped: usize,
}

impl TrainData {
    pub fn from_samples(model: &Model, samples: &[Sample]) -> Result<Self> {
        let mut data = TrainData { ids: Vec::new(), latents: Vec::new(), seqs: Vec::new(), empty: Vec::new(), skipped: 0 };
        for s in samples {
            let seq = match model.tokenize(&s.caption) {
                Ok(seq) => seq,
                Err(Error::CaptionTooLong { .. }) => {
                    data.skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            data.latents.extend(model.config.latent.encode(&s.image)?);
            data.seqs.push(seq);
            data.ids.push(s.id.clone());
            data.empty.push(s.is_empty_scene());
        }
        if data.seqs.is_empty() {
            return Err(Error::Argument("no usable training samples".into()));
        }
        if data.skipped > 0 {
            log::warn!("skipped {} captions longer than the token limit", data.skipped);
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }
}

/// Mutable optimisation state carried across resumptions.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub adam_unet: Adam,
    pub adam_encoder: Adam,
    /// Samples that received the null conditioning so far.
    pub null_uses: u64,
}

impl TrainState {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        Self {
            step: 0,
            adam_unet: Adam::with_moments(&model.unet_params, cfg.learning_rate, cfg.beta1, cfg.beta2),
            adam_encoder: Adam::with_moments(&model.encoder_params, cfg.learning_rate, cfg.beta1, cfg.beta2),
            null_uses: 0,
        }
    }
}

/// Randomness of one optimisation step, derived from (seed, step) so that
/// resumed runs replay exactly.
pub struct StepDraw {
    pub indices: Vec<usize>,
    pub t: Vec<usize>,
    pub eps: Vec<f32>,
    pub drop: Vec<bool>,
}

pub fn draw_step(cfg: &TrainConfig, data: &TrainData, steps: usize, latent_len: usize, step: usize) -> StepDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step as u64 + 1);
    let b = cfg.batch_size;
    let indices: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.len())).collect();
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(0..steps)).collect();
    let eps: Vec<f32> = (0..b * latent_len).map(|_| StandardNormal.sample(&mut rng)).collect();
    let drop = indices.iter().map(|&i| data.empty[i] && rng.random_bool(cfg.uncond_drop_prob)).collect();
    StepDraw { indices, t, eps, drop }
}

/// Builds the training loss for one batch on `g`. Returns the loss and the
/// bound parameter sets (denoiser, encoder when learnable).
pub fn build_loss<R: groundiff_nn::Real>(
    g: &mut Graph<R>,
    model: &Model,
    unet_params: &groundiff_nn::ParamSet<R>,
    encoder_params: &groundiff_nn::ParamSet<R>,
    mode: EncoderMode,
    data: &TrainData,
    frozen_cond: Option<&[f32]>,
    draw: &StepDraw,
) -> Result<(Var, groundiff_nn::Bound, Option<groundiff_nn::Bound>)> {
    let b = draw.indices.len();
    let z = model.z();
    let len = model.config.latent.len();
    let (tm, d) = (model.t_max(), model.config.unet.cond_dim);
    let pu = unet_params.bind(g, true);
    let (cond, pe) = match mode {
        EncoderMode::Frozen => {
            let cache = frozen_cond.ok_or_else(|| Error::Argument("frozen training needs cached conditioning".into()))?;
            let per = tm * d;
            let vals: Vec<R> =
                draw.indices.iter().flat_map(|&i| cache[i * per..(i + 1) * per].iter().map(|&v| R::from_f64(v as f64))).collect();
            (g.constant(vals, &[b, tm, d]), None)
        }
        EncoderMode::Learnable => {
            let pe = encoder_params.bind(g, true);
            let seqs: Vec<&TokenSeq> = draw.indices.iter().map(|&i| &data.seqs[i]).collect();
            (model.encoder.forward(g, &pe, &seqs)?, Some(pe))
        }
    };
    let cond = if draw.drop.iter().any(|&x| x) {
        let null = g.tile(pu.var(model.unet.null_token), tm);
        g.substitute(cond, null, &draw.drop)
    } else {
        cond
    };
    let mut x = Vec::with_capacity(b * len);
    let sched = model.schedule();
    for (k, &i) in draw.indices.iter().enumerate() {
        let x0 = &data.latents[i * len..(i + 1) * len];
        x.extend(sched.q_sample(x0, draw.t[k], &draw.eps[k * len..(k + 1) * len])?);
    }
    let x = g.constant(x.into_iter().map(|v| R::from_f64(v as f64)).collect(), &[b, z, z, LATENT_CHANNELS]);
    let (eps_hat, _) = model.unet.forward(g, &pu, x, &draw.t, cond);
    let target = g.constant(draw.eps.iter().map(|&v| R::from_f64(v as f64)).collect(), &[b, z, z, LATENT_CHANNELS]);
    Ok((g.mse(eps_hat, target), pu, pe))
}

/// Encoder output for every training caption (frozen-mode cache).
pub fn encode_all(model: &Model, seqs: &[TokenSeq]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(seqs.len() * model.t_max() * model.config.unet.cond_dim);
    for chunk in seqs.chunks(64) {
        let refs: Vec<&TokenSeq> = chunk.iter().collect();
        out.extend(model.conditioning(&refs)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct TrainStats {
    /// `(step, loss)` of every step run in this call.
    pub losses: Vec<(usize, f32)>,
    pub null_uses: u64,
}

/// Runs optimisation steps until `state.step == until` (capped at
/// `cfg.steps`), appending `step,loss` rows to `loss_csv` when given.
pub fn train_steps(
    model: &mut Model,
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &TrainData,
    until: usize,
    loss_csv: Option<&Path>,
) -> Result<TrainStats> {
    cfg.validate()?;
    let until = until.min(cfg.steps);
    let frozen_cond = match cfg.encoder_mode {
        EncoderMode::Frozen => Some(encode_all(model, &data.seqs)?),
        EncoderMode::Learnable => None,
    };
    let mut csv = match loss_csv {
        Some(path) => {
            let fresh = !path.exists() || state.step == 0;
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(file);
            if fresh {
                writeln!(w, "step,loss").map_err(|e| Error::io(path, e))?;
            }
            Some((w, path))
        }
        None => None,
    };
    let mut stats = TrainStats::default();
    let steps_total = model.schedule().steps;
    let len = model.config.latent.len();
    while state.step < until {
        let draw = draw_step(cfg, data, steps_total, len, state.step);
        let mut g = Graph::<f32>::new();
        let (loss, pu, pe) = build_loss(
            &mut g,
            model,
            &model.unet_params,
            &model.encoder_params,
            cfg.encoder_mode,
            data,
            frozen_cond.as_deref(),
            &draw,
        )?;
        let lv = g.scalar(loss);
        if !lv.is_finite() {
            return Err(Error::Diverged {
                step: state.step,
                lr: cfg.learning_rate,
                loss: lv,
                batch: draw.indices.iter().map(|&i| data.ids[i].clone()).collect(),
            });
        }
        let mut grads = g.backward(loss);
        let gu = pu.gradients(&mut grads);
        state.adam_unet.step(&mut model.unet_params, &gu);
        if let Some(pe) = pe {
            let ge = pe.gradients(&mut grads);
            state.adam_encoder.step(&mut model.encoder_params, &ge);
        }
        let used = draw.drop.iter().filter(|&&x| x).count() as u64;
        state.null_uses += used;
        stats.null_uses += used;
        if let Some((w, path)) = csv.as_mut() {
            writeln!(w, "{},{}", state.step, lv).map_err(|e| Error::io(*path, e))?;
        }
        stats.losses.push((state.step, lv));
        state.step += 1;
        if state.step % 500 == 0 {
            log::info!("step {} loss {lv:.4}", state.step);
        }
    }
    if let Some((mut w, path)) = csv {
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(stats)
}
