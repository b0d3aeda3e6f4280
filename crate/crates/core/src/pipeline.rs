//! End-to-end helpers: model preparation, training and grounding evaluation.

use std::path::Path;

use crate::atlas::{default_noise_levels, extract_atlas_with, DEFAULT_LEVELS};
use crate::corpus::Sample;
use crate::diffusion::checkpoint::Checkpoint;
use crate::diffusion::model::{Model, ModelConfig};
use crate::diffusion::train::{train_steps, TrainConfig, TrainData, TrainStats};
use crate::error::Result;
use crate::grounding::{split_cases, GroundingCase};
use crate::keywords::KeywordTable;
use crate::text::{build_vocab, PretrainConfig, TokenSeq, VocabConfig};

/// Builds the vocabulary from training captions, initialises a model and
/// pretrains its encoder on the next-token objective.
pub fn prepare_model(
    train: &[Sample],
    vocab_cfg: &VocabConfig,
    pretrain: &PretrainConfig,
    configure: impl FnOnce(&mut ModelConfig),
    seed: u64,
) -> Result<Model> {
    let captions: Vec<&str> = train.iter().map(|s| s.caption.as_str()).collect();
    let vocab = build_vocab(&captions, vocab_cfg)?;
    let mut config = ModelConfig::new(vocab.len());
    configure(&mut config);
    let mut model = Model::new(config, vocab, seed)?;
    let seqs: Vec<TokenSeq> = train.iter().filter_map(|s| model.tokenize(&s.caption).ok()).collect();
    if pretrain.epochs > 0 {
        let losses = model.encoder.pretrain(&mut model.encoder_params, &seqs, pretrain)?;
        log::info!("encoder pretraining losses {losses:?}");
    }
    Ok(model)
}

/// Trains `ck` up to `cfg.steps`, saving a checkpoint every `save_every`
/// steps (and at the end) when `dir` is given.
pub fn train_checkpoint(ck: &mut Checkpoint, data: &TrainData, dir: Option<&Path>, save_every: usize) -> Result<TrainStats> {
    let mut stats = TrainStats::default();
    let loss_csv = dir.map(|d| d.join("loss.csv"));
    while ck.state.step < ck.train.steps {
        let until = if save_every == 0 { ck.train.steps } else { (ck.state.step / save_every + 1) * save_every };
        let cfg: TrainConfig = ck.train.clone();
        let s = train_steps(&mut ck.model, &mut ck.state, &cfg, data, until, loss_csv.as_deref())?;
        stats.losses.extend(s.losses);
        stats.null_uses += s.null_uses;
        if let Some(d) = dir {
            ck.save(&d.join("checkpoint.bin"))?;
        }
    }
    Ok(stats)
}

/// Atlases and grounding cases for every sample (samples with too-long
/// captions are skipped).
pub fn grounding_cases(model: &Model, samples: &[Sample], table: &KeywordTable, levels: Option<&[usize]>) -> Result<Vec<GroundingCase>> {
    let default = default_noise_levels(model.schedule().steps, DEFAULT_LEVELS);
    let levels = levels.unwrap_or(&default);
    let mut cases = Vec::new();
    for s in samples.iter().filter(|s| !s.is_empty_scene()) {
        let seq = match model.tokenize(&s.caption) {
            Ok(seq) => seq,
            Err(e) => {
                log::warn!("{}: {e}; skipped", s.id);
                continue;
            }
        };
        let cond = model.conditioning(&[&seq])?;
        let atlas = extract_atlas_with(model, &s.image, &s.id, &seq, &cond, &s.caption, levels)?;
        cases.extend(split_cases(s, &seq, &atlas, table)?);
    }
    Ok(cases)
}
