//! Small multi-label conv classifier used to check conditional generation.

use groundiff_nn::{Adam, Conv2d, Graph, GroupNorm, Linear, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::localization::auc_roc;
use crate::corpus::Sample;
use crate::diffusion::latent::LatentTransform;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Train on images passed through the latent encode/decode round trip.
    /// Off by default: the round trip erases most shape detail.
    pub roundtrip: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { steps: 4000, batch_size: 32, learning_rate: 3e-3, seed: 0, roundtrip: false }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeClassifier {
    pub classes: Vec<String>,
    pub side: usize,
    pub config: ProbeConfig,
    convs: Vec<(Conv2d, GroupNorm)>,
    head: Linear,
    params: ParamSet<f32>,
}

/// Image of a sample as the probe sees it.
pub fn probe_input(sample: &Sample, latent: &LatentTransform, roundtrip: bool) -> Result<Vec<f32>> {
    if roundtrip {
        latent.decode(&latent.encode(&sample.image)?)
    } else {
        Ok(sample.image.to_unit())
    }
}

impl ProbeClassifier {
    fn init(classes: Vec<String>, side: usize, config: ProbeConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        let convs = [(3, 16, 2), (16, 32, 2), (32, 64, 1), (64, 64, 2)]
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| {
                let name = format!("probe.c{}", i + 1);
                let conv = Conv2d::new(&mut ps, &mut rng, &name, cin, cout, 3, stride, 1);
                (conv, GroupNorm::new(&mut ps, &format!("{name}.norm"), cout, 8))
            })
            .collect();
        let head = Linear::new(&mut ps, &mut rng, "probe.head", 64, classes.len(), true);
        Self { classes, side, config, convs, head, params: ps }
    }

    fn logits(&self, g: &mut Graph<f32>, p: &groundiff_nn::Bound, images: &[&[f32]]) -> groundiff_nn::Var {
        let s = self.side;
        let data: Vec<f32> = images.iter().flat_map(|im| im.iter().map(|v| 2.0 * v - 1.0)).collect();
        let mut x = g.constant(data, &[images.len(), s, s, 3]);
        for (c, n) in &self.convs {
            x = c.forward(g, p, x);
            x = n.forward(g, p, x);
            x = g.relu(x);
        }
        let f = g.mean_middle(x);
        self.head.forward(g, p, f)
    }

    /// Trains on `[0, 1]` images with one label vector per image.
    pub fn train(classes: Vec<String>, images: &[Vec<f32>], labels: &[Vec<bool>], side: usize, config: ProbeConfig) -> Result<Self> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Argument("probe needs one label vector per image".into()));
        }
        if images.iter().any(|im| im.len() != side * side * 3) || labels.iter().any(|l| l.len() != classes.len()) {
            return Err(Error::Shape("probe inputs disagree with side or class count".into()));
        }
        let mut probe = Self::init(classes, side, config);
        let mut adam = Adam::new(&probe.params, probe.config.learning_rate);
        for step in 0..probe.config.steps {
            let mut rng = ChaCha8Rng::seed_from_u64(probe.config.seed);
            rng.set_stream(step as u64 + 1);
            let idx: Vec<usize> = (0..probe.config.batch_size).map(|_| rng.random_range(0..images.len())).collect();
            let batch: Vec<&[f32]> = idx.iter().map(|&i| images[i].as_slice()).collect();
            let targets: Vec<f32> = idx.iter().flat_map(|&i| labels[i].iter().map(|&l| l as u8 as f32)).collect();
            let mut g = Graph::<f32>::new();
            let p = probe.params.bind(&mut g, true);
            let z = probe.logits(&mut g, &p, &batch);
            let loss = g.bce_with_logits(z, &targets);
            let lv = g.scalar(loss);
            if !lv.is_finite() {
                return Err(Error::Diverged { step, lr: probe.config.learning_rate, loss: lv, batch: Vec::new() });
            }
            let mut grads = g.backward(loss);
            adam.step(&mut probe.params, &p.gradients(&mut grads));
        }
        Ok(probe)
    }

    /// Trains on corpus samples labelled by the classes they contain.
    pub fn train_on_samples(classes: Vec<String>, samples: &[Sample], latent: &LatentTransform, config: ProbeConfig) -> Result<Self> {
        let images = samples.iter().map(|s| probe_input(s, latent, config.roundtrip)).collect::<Result<Vec<_>>>()?;
        let labels = samples_labels(&classes, samples);
        Self::train(classes, &images, &labels, latent.image_size, config)
    }

    /// Per-class sigmoid probabilities, one row per image.
    pub fn predict(&self, images: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            if chunk.iter().any(|im| im.len() != self.side * self.side * 3) {
                return Err(Error::Shape("probe input has the wrong size".into()));
            }
            let refs: Vec<&[f32]> = chunk.iter().map(Vec::as_slice).collect();
            let mut g = Graph::<f32>::new();
            let p = self.params.bind(&mut g, false);
            let z = self.logits(&mut g, &p, &refs);
            let k = self.classes.len();
            out.extend(g.value(z).chunks(k).map(|r| r.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect()));
        }
        Ok(out)
    }

    pub fn class_index(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }
}

pub fn samples_labels(classes: &[String], samples: &[Sample]) -> Vec<Vec<bool>> {
    samples.iter().map(|s| classes.iter().map(|c| s.objects.iter().any(|o| &o.class == c)).collect()).collect()
}

/// Per-class AUC of the probe scores; NaN when a class has no positive or
/// no negative image.
pub fn probe_auc(probe: &ProbeClassifier, images: &[Vec<f32>], labels: &[Vec<bool>]) -> Result<Vec<f64>> {
    let scores = probe.predict(images)?;
    Ok((0..probe.classes.len())
        .map(|k| {
            let s: Vec<f32> = scores.iter().map(|r| r[k]).collect();
            let l: Vec<bool> = labels.iter().map(|r| r[k]).collect();
            auc_roc(&s, &l).unwrap_or(f64::NAN)
        })
        .collect())
}

/// Mean over the finite entries.
pub fn nan_mean(values: &[f64]) -> f64 {
    let ok: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if ok.is_empty() {
        f64::NAN
    } else {
        ok.iter().sum::<f64>() / ok.len() as f64
    }
}
