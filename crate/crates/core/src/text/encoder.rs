//! Small causal transformer text encoder.

use std::fmt;
use std::str::FromStr;

use groundiff_nn::{Adam, Bound, Graph, LayerNorm, Linear, ParamId, ParamSet, Real, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::vocab::TokenSeq;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    Frozen,
    Learnable,
}

impl fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderMode::Frozen => "frozen",
            EncoderMode::Learnable => "learnable",
        })
    }
}

impl FromStr for EncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(EncoderMode::Frozen),
            "learnable" => Ok(EncoderMode::Learnable),
            other => Err(Error::Argument(format!("unknown encoder mode {other:?} (expected frozen or learnable)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub t_max: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
}

impl TextEncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self { vocab_size, t_max: 32, d_model: 64, n_layers: 2, n_heads: 2, mlp_hidden: 128 }
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Parameter layout of the encoder; values live in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

/// Pretraining settings for the next-token objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 32, learning_rate: 1e-3, seed: 0 }
    }
}

impl TextEncoder {
    pub fn new<G: Rng + ?Sized>(config: TextEncoderConfig, rng: &mut G) -> (Self, ParamSet<f32>) {
        assert_eq!(config.d_model % config.n_heads, 0, "d_model must split evenly across heads");
        let mut ps = ParamSet::new();
        let d = config.d_model;
        let normal = Normal::new(0.0f32, 0.02).unwrap();
        let tok_emb = ps.add("tok_emb", &[config.vocab_size, d], (0..config.vocab_size * d).map(|_| normal.sample(rng)).collect());
        let pos_emb = ps.add("pos_emb", &[config.t_max, d], (0..config.t_max * d).map(|_| normal.sample(rng)).collect());
        let blocks = (0..config.n_layers)
            .map(|i| {
                let n = |s: &str| format!("block{i}.{s}");
                Block {
                    ln1: LayerNorm::new(&mut ps, &n("ln1"), d),
                    q: Linear::new(&mut ps, rng, &n("q"), d, d, false),
                    k: Linear::new(&mut ps, rng, &n("k"), d, d, false),
                    v: Linear::new(&mut ps, rng, &n("v"), d, d, false),
                    out: Linear::new(&mut ps, rng, &n("out"), d, d, true),
                    ln2: LayerNorm::new(&mut ps, &n("ln2"), d),
                    fc1: Linear::new(&mut ps, rng, &n("fc1"), d, config.mlp_hidden, true),
                    fc2: Linear::new(&mut ps, rng, &n("fc2"), config.mlp_hidden, d, true),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(&mut ps, "ln_f", d);
        (Self { config, tok_emb, pos_emb, blocks, ln_f }, ps)
    }

    fn check_ids(&self, seqs: &[&TokenSeq]) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(seqs.len() * self.config.t_max);
        for s in seqs {
            if s.ids.len() != self.config.t_max {
                return Err(Error::Shape(format!("token sequence has length {}, encoder expects {}", s.ids.len(), self.config.t_max)));
            }
            for &id in &s.ids {
                if id as usize >= self.config.vocab_size {
                    return Err(Error::Argument(format!("token id {id} outside vocabulary of {}", self.config.vocab_size)));
                }
                ids.push(id as usize);
            }
        }
        Ok(ids)
    }

    /// Encodes a batch into `[batch, t_max, d_model]`.
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, p: &Bound, seqs: &[&TokenSeq]) -> Result<Var> {
        let ids = self.check_ids(seqs)?;
        let (b, t, d) = (seqs.len(), self.config.t_max, self.config.d_model);
        let x = g.embedding(p.var(self.tok_emb), &ids);
        let x = g.reshape(x, &[b, t, d]);
        let pos = g.tile(p.var(self.pos_emb), b);
        let mut x = g.add(x, pos);
        let dh = d / self.config.n_heads;
        for blk in &self.blocks {
            let h = blk.ln1.forward(g, p, x);
            let q = blk.q.forward(g, p, h);
            let k = blk.k.forward(g, p, h);
            let v = blk.v.forward(g, p, h);
            let mut heads: Option<Var> = None;
            for hd in 0..self.config.n_heads {
                let qh = g.slice_last(q, hd * dh, dh);
                let kh = g.slice_last(k, hd * dh, dh);
                let vh = g.slice_last(v, hd * dh, dh);
                let s = g.batch_matmul(qh, kh, false, true);
                let s = g.scale(s, 1.0 / (dh as f64).sqrt());
                let a = g.causal_softmax(s);
                let o = g.batch_matmul(a, vh, false, false);
                heads = Some(match heads {
                    None => o,
                    Some(prev) => g.concat_last(prev, o),
                });
            }
            let att = blk.out.forward(g, p, heads.expect("at least one head"));
            x = g.add(x, att);
            let h = blk.ln2.forward(g, p, x);
            let h = blk.fc1.forward(g, p, h);
            let h = g.silu(h);
            let h = blk.fc2.forward(g, p, h);
            x = g.add(x, h);
        }
        Ok(self.ln_f.forward(g, p, x))
    }

    /// Inference-only encoding of one sequence, `t_max * d_model` values.
    pub fn encode(&self, params: &ParamSet<f32>, seq: &TokenSeq) -> Result<Vec<f32>> {
        let mut g = Graph::<f32>::new();
        let p = params.bind(&mut g, false);
        let out = self.forward(&mut g, &p, &[seq])?;
        Ok(g.value(out).to_vec())
    }

    /// Next-token logits through the tied token embedding.
    fn lm_logits<R: Real>(&self, g: &mut Graph<R>, p: &Bound, hidden: Var) -> Var {
        g.matmul(hidden, p.var(self.tok_emb), false, true)
    }

    /// Mean next-token cross-entropy over a batch.
    pub fn lm_loss<R: Real>(&self, g: &mut Graph<R>, p: &Bound, seqs: &[&TokenSeq]) -> Result<Var> {
        let h = self.forward(g, p, seqs)?;
        let logits = self.lm_logits(g, p, h);
        let t = self.config.t_max;
        let mut targets = Vec::with_capacity(seqs.len() * t);
        for s in seqs {
            for i in 0..t {
                targets.push((i + 1 < s.n_real).then(|| s.ids[i + 1] as usize));
            }
        }
        Ok(g.cross_entropy(logits, &targets))
    }

    /// Next-token pretraining; returns the mean loss of each epoch.
    pub fn pretrain(&self, params: &mut ParamSet<f32>, seqs: &[TokenSeq], cfg: &PretrainConfig) -> Result<Vec<f32>> {
        if seqs.is_empty() {
            return Err(Error::Argument("no captions to pretrain on".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = Adam::new(params, cfg.learning_rate);
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let (mut sum, mut n) = (0.0f64, 0usize);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let batch: Vec<&TokenSeq> = chunk.iter().map(|&i| &seqs[i]).collect();
                let mut g = Graph::<f32>::new();
                let p = params.bind(&mut g, true);
                let loss = self.lm_loss(&mut g, &p, &batch)?;
                let lv = g.scalar(loss);
                if !lv.is_finite() {
                    return Err(Error::Diverged { step: n, lr: cfg.learning_rate, loss: lv, batch: Vec::new() });
                }
                let mut grads = g.backward(loss);
                adam.step(params, &p.gradients(&mut grads));
                sum += lv as f64;
                n += 1;
            }
            epoch_losses.push((sum / n as f64) as f32);
        }
        Ok(epoch_losses)
    }
}

/// 64-bit digest (first 8 bytes of SHA-256) of every parameter value.
pub fn param_checksum(params: &ParamSet<f32>) -> u64 {
    let mut h = Sha256::new();
    for p in params.iter() {
        h.update(p.name.as_bytes());
        for v in &p.data {
            h.update(v.to_le_bytes());
        }
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
