//! Three-resolution cross-attention U-Net predicting the added noise.

use groundiff_nn::{Bound, Conv2d, Graph, GroupNorm, Linear, ParamId, ParamSet, Real, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub latent_channels: usize,
    /// Channel widths at resolutions Z, Z/2, Z/4.
    pub widths: [usize; 3],
    pub cond_dim: usize,
    /// Query/key/value width of every cross-attention layer.
    pub attn_dim: usize,
    pub time_dim: usize,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { latent_channels: 3, widths: [16, 32, 64], cond_dim: 64, attn_dim: 32, time_dim: 128, norm_groups: 8 }
    }
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Linear>,
    c_out: usize,
}

impl ResBlock {
    fn new<G: Rng + ?Sized>(ps: &mut ParamSet<f32>, rng: &mut G, name: &str, c_in: usize, c_out: usize, cfg: &UNetConfig) -> Self {
        Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), c_in, cfg.norm_groups),
            conv1: Conv2d::new(ps, rng, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1),
            time: Linear::new(ps, rng, &format!("{name}.time"), cfg.time_dim, c_out, true),
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), c_out, cfg.norm_groups),
            conv2: Conv2d::new(ps, rng, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1),
            skip: (c_in != c_out).then(|| Linear::new(ps, rng, &format!("{name}.skip"), c_in, c_out, true)),
            c_out,
        }
    }

    fn forward<R: Real>(&self, g: &mut Graph<R>, p: &Bound, x: Var, temb: Var) -> Var {
        let h = self.norm1.forward(g, p, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, p, h);
        let t = self.time.forward(g, p, temb);
        let h = g.add_per_sample(h, t);
        let h = self.norm2.forward(g, p, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h);
        let skip = match &self.skip {
            Some(lin) => {
                let s = g.shape(x).to_vec();
                let y = lin.forward(g, p, x);
                g.reshape(y, &[s[0], s[1], s[2], self.c_out])
            }
            None => x,
        };
        g.add(h, skip)
    }
}

/// Single-head cross-attention from image positions (queries) to text
/// tokens (keys/values), with a residual connection.
#[derive(Clone, Copy, Debug)]
struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    attn_dim: usize,
}

impl CrossAttention {
    fn new<G: Rng + ?Sized>(ps: &mut ParamSet<f32>, rng: &mut G, name: &str, channels: usize, cfg: &UNetConfig) -> Self {
        Self {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), channels, cfg.norm_groups),
            q: Linear::new(ps, rng, &format!("{name}.q"), channels, cfg.attn_dim, false),
            k: Linear::new(ps, rng, &format!("{name}.k"), cfg.cond_dim, cfg.attn_dim, false),
            v: Linear::new(ps, rng, &format!("{name}.v"), cfg.cond_dim, cfg.attn_dim, false),
            out: Linear::new(ps, rng, &format!("{name}.out"), cfg.attn_dim, channels, true),
            attn_dim: cfg.attn_dim,
        }
    }

    /// Returns the block output and the attention probabilities `[n, h*w, tokens]`.
    fn forward<R: Real>(&self, g: &mut Graph<R>, p: &Bound, x: Var, cond: Var) -> (Var, Var) {
        let s = g.shape(x).to_vec();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let tokens = g.shape(cond)[1];
        let xn = self.norm.forward(g, p, x);
        let q = self.q.forward(g, p, xn);
        let q = g.reshape(q, &[n, h * w, self.attn_dim]);
        let k = self.k.forward(g, p, cond);
        let v = self.v.forward(g, p, cond);
        let scores = g.batch_matmul(q, k, false, true);
        let scores = g.scale(scores, 1.0 / (self.attn_dim as f64).sqrt());
        let probs = g.softmax(scores);
        let o = g.batch_matmul(probs, v, false, false);
        let o = self.out.forward(g, p, o);
        let o = g.reshape(o, &[n, h, w, c]);
        debug_assert_eq!(g.shape(probs), &[n, h * w, tokens]);
        (g.add(x, o), probs)
    }
}

/// Attention probabilities emitted by one cross-attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTap {
    pub layer: usize,
    pub height: usize,
    pub width: usize,
    /// `[n, height * width, tokens]`, row-stochastic.
    pub probs: Var,
}

/// Parameter layout of the denoiser; the values live in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: [(ResBlock, CrossAttention); 3],
    downsample: [Conv2d; 2],
    mid: ResBlock,
    up: [(ResBlock, CrossAttention); 3],
    upsample: [Conv2d; 2],
    out_norm: GroupNorm,
    conv_out: Conv2d,
    /// Learned conditioning row substituted for dropped captions.
    pub null_token: ParamId,
}

/// Sinusoidal embedding of the integer timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

const SINUSOID_DIM: usize = 32;

impl UNet {
    pub fn new<G: Rng + ?Sized>(cfg: UNetConfig, rng: &mut G) -> (Self, ParamSet<f32>) {
        let mut ps = ParamSet::new();
        let [c0, c1, c2] = cfg.widths;
        let time1 = Linear::new(&mut ps, rng, "time.fc1", SINUSOID_DIM, cfg.time_dim, true);
        let time2 = Linear::new(&mut ps, rng, "time.fc2", cfg.time_dim, cfg.time_dim, true);
        let conv_in = Conv2d::new(&mut ps, rng, "conv_in", cfg.latent_channels, c0, 3, 1, 1);
        let down = [
            (ResBlock::new(&mut ps, rng, "down0.res", c0, c0, &cfg), CrossAttention::new(&mut ps, rng, "down0.xattn", c0, &cfg)),
            (ResBlock::new(&mut ps, rng, "down1.res", c1, c1, &cfg), CrossAttention::new(&mut ps, rng, "down1.xattn", c1, &cfg)),
            (ResBlock::new(&mut ps, rng, "down2.res", c2, c2, &cfg), CrossAttention::new(&mut ps, rng, "down2.xattn", c2, &cfg)),
        ];
        let downsample = [
            Conv2d::new(&mut ps, rng, "downsample0", c0, c1, 3, 2, 1),
            Conv2d::new(&mut ps, rng, "downsample1", c1, c2, 3, 2, 1),
        ];
        let mid = ResBlock::new(&mut ps, rng, "mid.res", c2, c2, &cfg);
        let up = [
            (ResBlock::new(&mut ps, rng, "up0.res", 2 * c0, c0, &cfg), CrossAttention::new(&mut ps, rng, "up0.xattn", c0, &cfg)),
            (ResBlock::new(&mut ps, rng, "up1.res", 2 * c1, c1, &cfg), CrossAttention::new(&mut ps, rng, "up1.xattn", c1, &cfg)),
            (ResBlock::new(&mut ps, rng, "up2.res", 2 * c2, c2, &cfg), CrossAttention::new(&mut ps, rng, "up2.xattn", c2, &cfg)),
        ];
        let upsample = [
            Conv2d::new(&mut ps, rng, "upsample0", c1, c0, 3, 1, 1),
            Conv2d::new(&mut ps, rng, "upsample1", c2, c1, 3, 1, 1),
        ];
        let out_norm = GroupNorm::new(&mut ps, "out.norm", c0, cfg.norm_groups);
        let conv_out = Conv2d::new(&mut ps, rng, "conv_out", c0, cfg.latent_channels, 3, 1, 1);
        let null_token = ps.add(
            "null_token",
            &[cfg.cond_dim],
            (0..cfg.cond_dim).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        );
        let unet = Self { config: cfg, time1, time2, conv_in, down, downsample, mid, up, upsample, out_norm, conv_out, null_token };
        (unet, ps)
    }

    /// Number of cross-attention layers.
    pub fn attention_layers(&self) -> usize {
        self.down.len() + self.up.len()
    }

    /// Spatial side of each cross-attention layer, in emission order.
    pub fn attention_sides(&self, z: usize) -> Vec<usize> {
        vec![z, z / 2, z / 4, z / 4, z / 2, z]
    }

    /// Predicts noise for `x_t` (`[n, z, z, latent_channels]`) at timesteps
    /// `t` given conditioning `cond` (`[n, tokens, cond_dim]`). Taps are
    /// listed in forward order: down Z, Z/2, Z/4 then up Z/4, Z/2, Z.
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, p: &Bound, x_t: Var, t: &[usize], cond: Var) -> (Var, Vec<AttentionTap>) {
        let n = g.shape(x_t)[0];
        assert_eq!(t.len(), n, "one timestep per sample");
        let sinus: Vec<R> = t.iter().flat_map(|&ti| timestep_embedding(ti, SINUSOID_DIM)).map(R::from_f64).collect();
        let sinus = g.constant(sinus, &[n, SINUSOID_DIM]);
        let temb = self.time1.forward(g, p, sinus);
        let temb = g.silu(temb);
        let temb = self.time2.forward(g, p, temb);
        let temb = g.silu(temb);

        let mut taps = Vec::with_capacity(self.attention_layers());
        let mut record = |g: &Graph<R>, probs: Var, layer: usize, x: Var| {
            let s = g.shape(x);
            taps.push(AttentionTap { layer, height: s[1], width: s[2], probs });
        };

        let mut h = self.conv_in.forward(g, p, x_t);
        let mut skips = Vec::with_capacity(3);
        for (level, (res, attn)) in self.down.iter().enumerate() {
            if level > 0 {
                h = self.downsample[level - 1].forward(g, p, h);
            }
            h = res.forward(g, p, h, temb);
            let (out, probs) = attn.forward(g, p, h, cond);
            record(g, probs, level, out);
            h = out;
            skips.push(h);
        }
        h = self.mid.forward(g, p, h, temb);
        for level in (0..3).rev() {
            let (res, attn) = &self.up[level];
            if level < 2 {
                h = g.upsample2x(h);
                h = self.upsample[level].forward(g, p, h);
            }
            let cat = g.concat_last(h, skips[level]);
            h = res.forward(g, p, cat, temb);
            let (out, probs) = attn.forward(g, p, h, cond);
            record(g, probs, 5 - level, out);
            h = out;
        }
        let h = self.out_norm.forward(g, p, h);
        let h = g.silu(h);
        (self.conv_out.forward(g, p, h), taps)
    }
}
