//! Experiment matrix configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use groundiff::corpus::Variability;
use groundiff::text::EncoderMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{BenchError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    pub batch_size: usize,
    pub steps_frozen: usize,
    pub steps_learnable: usize,
    pub learning_rate: f32,
    pub uncond_drop_prob: f64,
    /// Checkpoint interval; an interrupted cell resumes from the last one.
    pub save_every: usize,
}

impl Default for TrainOverrides {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps_frozen: 10_000,
            steps_learnable: 20_000,
            learning_rate: 1e-4,
            uncond_drop_prob: 0.30,
            save_every: 1000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Never substitute the null conditioning during training.
    pub no_uncond_training: bool,
    /// Extra frozen-encoder steps after a learnable run (0 = off).
    pub continue_frozen_after_learnable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Atlas noise levels; empty means the default spread.
    pub noise_levels: Vec<usize>,
    pub min_occurrences: usize,
    /// Generative metrics (Fréchet, diversity, probe) are skipped when false.
    pub generative: bool,
    pub fid_samples: usize,
    pub diversity_prompts: usize,
    pub group_size: usize,
    pub sampling_steps: usize,
    pub guidance: f32,
    pub probe_steps: usize,
    pub probe_samples_per_class: usize,
    pub feature_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            noise_levels: Vec::new(),
            min_occurrences: 25,
            generative: true,
            fid_samples: 500,
            diversity_prompts: 100,
            group_size: 4,
            sampling_steps: 75,
            guidance: 4.0,
            probe_steps: 4000,
            probe_samples_per_class: 32,
            feature_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Corpus directory of each caption-variability regime.
    pub corpora: BTreeMap<Variability, PathBuf>,
    #[serde(default = "default_modes")]
    pub modes: Vec<EncoderMode>,
    #[serde(default = "default_regimes")]
    pub regimes: Vec<Variability>,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainOverrides,
    #[serde(default)]
    pub ablation: Ablations,
    #[serde(default)]
    pub eval: EvalOptions,
}

fn default_modes() -> Vec<EncoderMode> {
    vec![EncoderMode::Frozen, EncoderMode::Learnable]
}

fn default_regimes() -> Vec<Variability> {
    vec![Variability::High]
}

fn default_runs() -> usize {
    3
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.n_runs == 0 {
            return bad("n_runs must be at least 1".into());
        }
        if self.seeds.len() != self.n_runs {
            return bad(format!("{} seeds given for {} runs", self.seeds.len(), self.n_runs));
        }
        if self.modes.is_empty() || self.regimes.is_empty() {
            return bad("modes and regimes must be non-empty".into());
        }
        if let Some(r) = self.regimes.iter().find(|r| !self.corpora.contains_key(r)) {
            return bad(format!("no corpus configured for regime {r}"));
        }
        if !(0.0..=1.0).contains(&self.train.uncond_drop_prob) {
            return bad("uncond_drop_prob must lie in [0, 1]".into());
        }
        if self.train.steps_frozen == 0 || self.train.steps_learnable == 0 || self.train.batch_size == 0 {
            return bad("step counts and batch size must be positive".into());
        }
        if self.eval.generative && self.eval.group_size < 2 {
            return bad("eval.group_size must be at least 2".into());
        }
        Ok(())
    }

    /// Probability actually used for null substitution.
    pub fn effective_drop_prob(&self) -> f64 {
        if self.ablation.no_uncond_training {
            0.0
        } else {
            self.train.uncond_drop_prob
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        let d = Sha256::digest(&json);
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
