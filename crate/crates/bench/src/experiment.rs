//! The (regime x mode x run) experiment matrix.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use groundiff::corpus::{filter_eval_set, Corpus, Sample, Split, Variability};
use groundiff::diffusion::checkpoint::Checkpoint;
use groundiff::diffusion::model::Model;
use groundiff::diffusion::train::{TrainConfig, TrainData};
use groundiff::grounding::{split_cases, GroundingCase};
use groundiff::keywords::KeywordTable;
use groundiff::metrics::{
    diversity, frechet_distance, generate, generation_probe_auc, nan_mean, probe_auc, probe_input, samples_labels,
    score_cases, write_scores_csv, CaseScores, FeatureExtractor, ProbeClassifier, ProbeConfig, SamplingOptions,
    ScoreSummary,
};
use groundiff::pipeline::{prepare_model, train_checkpoint};
use groundiff::text::{EncoderMode, PretrainConfig, VocabConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{BenchError, Result};
use crate::words::{atlas_samples, rank_words, WordRanking};

/// Training variant of a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Frozen,
    Learnable,
    /// Learnable run continued with the encoder frozen.
    LearnableThenFrozen,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Frozen => "frozen",
            Variant::Learnable => "learnable",
            Variant::LearnableThenFrozen => "learnable_then_frozen",
        }
    }
}

impl From<EncoderMode> for Variant {
    fn from(m: EncoderMode) -> Self {
        match m {
            EncoderMode::Frozen => Variant::Frozen,
            EncoderMode::Learnable => Variant::Learnable,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Generative {
    pub frechet: f64,
    /// Same extractor, real pool against uniform-noise images.
    pub frechet_noise: f64,
    pub diversity: f64,
    /// Per-class probe AUC of class-prompted vs empty-prompted samples.
    pub probe_auc: BTreeMap<String, f64>,
    pub probe_auc_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub regime: Variability,
    pub variant: Variant,
    pub run: usize,
    pub seed: u64,
    pub status: CellStatus,
    pub steps: usize,
    pub null_uses: u64,
    pub skipped_captions: usize,
    pub localization: Option<ScoreSummary>,
    pub per_class: BTreeMap<String, ScoreSummary>,
    pub words: WordRanking,
    pub generative: Option<Generative>,
    pub checkpoint_hash: String,
    /// Per-case CSV backing `localization`, relative to the report.
    pub scores_csv: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation over runs (0 for a single run).
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Self { mean, std, n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub regime: Variability,
    pub variant: Variant,
    pub cnr: MeanStd,
    pub cnr_abs: MeanStd,
    pub auc: MeanStd,
    pub top1: MeanStd,
    pub frechet: Option<MeanStd>,
    pub diversity: Option<MeanStd>,
    pub probe_auc: Option<MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub code_version: String,
    pub corpus_hashes: BTreeMap<Variability, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub provenance: Provenance,
    pub cells: Vec<CellReport>,
    pub aggregates: Vec<Aggregate>,
    /// Per-class probe AUC on the real test split of each regime.
    pub probe_real_auc: BTreeMap<Variability, BTreeMap<String, f64>>,
}

impl Report {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.status != CellStatus::Ok).count()
    }

    pub fn aggregate(&self, regime: Variability, variant: Variant) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.regime == regime && a.variant == variant)
    }

    pub fn cell(&self, regime: Variability, variant: Variant, run: usize) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.regime == regime && c.variant == variant && c.run == run)
    }
}

/// Data shared by every cell of a regime.
struct RegimeData {
    train: Vec<Sample>,
    eval: Vec<Sample>,
    pool: Vec<Sample>,
    probe: Option<ProbeClassifier>,
    probe_real: BTreeMap<String, f64>,
    real_features: Vec<Vec<f64>>,
    frechet_noise: f64,
    class_prompts: Vec<(String, String)>,
    corpus_hash: String,
}

/// Test split with empty scenes capped at a fifth of the pool.
pub fn fidelity_pool(test: &[Sample], max: usize) -> Vec<Sample> {
    let objects: Vec<&Sample> = test.iter().filter(|s| !s.is_empty_scene()).collect();
    let cap = objects.len() / 4;
    let empties = test.iter().filter(|s| s.is_empty_scene()).take(cap);
    let mut pool: Vec<Sample> = objects.into_iter().chain(empties).cloned().collect();
    pool.sort_by(|a, b| a.id.cmp(&b.id));
    pool.truncate(max);
    pool
}

fn hex16(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn uniform_noise_images(n: usize, side: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..side * side * 3).map(|_| rng.random::<f32>()).collect()).collect()
}

fn load_regime(cfg: &ExperimentConfig, regime: Variability, table: &KeywordTable) -> Result<RegimeData> {
    let dir = &cfg.corpora[&regime];
    let corpus = Corpus::open(dir)?;
    let train = corpus.load_split(Split::Train)?;
    let eval = filter_eval_set(&corpus, Split::Test, table)?;
    let test = corpus.load_split(Split::Test)?;
    let pool = fidelity_pool(&test, cfg.eval.fid_samples);
    let classes = corpus.manifest.scene_spec.object_classes.clone();
    // one in-distribution prompt per class: the first single-object caption
    let class_prompts = classes
        .iter()
        .map(|c| {
            let p = train
                .iter()
                .find(|s| s.objects.len() == 1 && &s.objects[0].class == c && table.mentions(&s.caption, c))
                .map(|s| s.caption.clone())
                .unwrap_or_else(|| c.clone());
            (c.clone(), p)
        })
        .collect();
    let mut data = RegimeData {
        train,
        eval,
        pool,
        probe: None,
        probe_real: BTreeMap::new(),
        real_features: Vec::new(),
        frechet_noise: f64::NAN,
        class_prompts,
        corpus_hash: corpus.manifest.hash(),
    };
    if cfg.eval.generative {
        let latent = groundiff::diffusion::latent::LatentTransform::default();
        let probe_cfg = ProbeConfig { steps: cfg.eval.probe_steps, seed: cfg.eval.feature_seed, ..ProbeConfig::default() };
        let probe = ProbeClassifier::train_on_samples(classes, &data.train, &latent, probe_cfg.clone())?;
        let imgs = test.iter().map(|s| probe_input(s, &latent, probe_cfg.roundtrip)).collect::<groundiff::Result<Vec<_>>>()?;
        let auc = probe_auc(&probe, &imgs, &samples_labels(&probe.classes, &test))?;
        data.probe_real = probe.classes.iter().cloned().zip(auc).collect();
        data.probe = Some(probe);
        let fx = FeatureExtractor::new(cfg.eval.feature_seed);
        let side = latent.image_size;
        let real: Vec<Vec<f32>> = data.pool.iter().map(|s| s.image.to_unit()).collect();
        data.real_features = fx.features(&real, side)?;
        let noise = uniform_noise_images(real.len(), side, cfg.eval.feature_seed ^ 0x5eed);
        data.frechet_noise = frechet_distance(&data.real_features, &fx.features(&noise, side)?)?;
    }
    Ok(data)
}

fn train_config(cfg: &ExperimentConfig, mode: EncoderMode, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: cfg.train.batch_size,
        steps: match mode {
            EncoderMode::Frozen => cfg.train.steps_frozen,
            EncoderMode::Learnable => cfg.train.steps_learnable,
        },
        learning_rate: cfg.train.learning_rate,
        uncond_drop_prob: cfg.effective_drop_prob(),
        encoder_mode: mode,
        seed,
        ..TrainConfig::for_mode(mode)
    }
}

/// Grounding cases and word ranking from one atlas pass over the eval set.
pub fn evaluate_localization(
    model: &Model,
    eval: &[Sample],
    table: &KeywordTable,
    levels: &[usize],
    min_occurrences: usize,
) -> Result<(Vec<GroundingCase>, Vec<CaseScores>, WordRanking)> {
    let items = atlas_samples(model, eval, Some(levels))?;
    let mut cases = Vec::new();
    for it in &items {
        cases.extend(split_cases(it.sample, &it.seq, &it.atlas, table)?);
    }
    let scores = score_cases(&cases)?;
    let words = rank_words(&items, min_occurrences, 3)?;
    Ok((cases, scores, words))
}

fn evaluate_generative(cfg: &ExperimentConfig, model: &Model, data: &RegimeData, seed: u64) -> Result<Generative> {
    let opts = SamplingOptions { n_steps: cfg.eval.sampling_steps, guidance: cfg.eval.guidance, seed };
    let side = model.config.latent.image_size;
    let mut synth = Vec::with_capacity(data.pool.len());
    for (i, s) in data.pool.iter().enumerate() {
        let o = SamplingOptions { seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64), ..opts };
        synth.extend(generate(model, &s.caption, 1, &o)?);
    }
    let fx = FeatureExtractor::new(cfg.eval.feature_seed);
    let frechet = frechet_distance(&data.real_features, &fx.features(&synth, side)?)?;
    let prompts: Vec<String> =
        data.eval.iter().map(|s| s.caption.clone()).take(cfg.eval.diversity_prompts).collect();
    let div = if prompts.is_empty() { f64::NAN } else { diversity(model, &prompts, cfg.eval.group_size, 3, &opts)? };
    let probe = data.probe.as_ref().expect("probe is trained when generative metrics are on");
    let per = generation_probe_auc(model, probe, &data.class_prompts, cfg.eval.probe_samples_per_class, &opts)?;
    let vals: Vec<f64> = per.iter().map(|p| p.1).collect();
    Ok(Generative {
        frechet,
        frechet_noise: data.frechet_noise,
        diversity: div,
        probe_auc: per.into_iter().collect(),
        probe_auc_mean: nan_mean(&vals),
    })
}

struct CellSpec {
    regime: Variability,
    variant: Variant,
    run: usize,
    seed: u64,
}

fn cell_dir(out: &Path, c: &CellSpec) -> PathBuf {
    out.join(c.regime.as_str()).join(c.variant.as_str()).join(format!("run{}", c.run))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serialises");
    fs::write(path, text).map_err(|e| BenchError::io(path, e))
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    cfg: &ExperimentConfig,
    spec: &CellSpec,
    base: &Model,
    data: &RegimeData,
    table: &KeywordTable,
    levels: &[usize],
    out: &Path,
    from: Option<&Path>,
) -> Result<CellReport> {
    let dir = cell_dir(out, spec);
    fs::create_dir_all(&dir).map_err(|e| BenchError::io(&dir, e))?;
    let ck_path = dir.join("checkpoint.bin");
    let mut ck = if ck_path.exists() {
        log::info!("resuming {}", ck_path.display());
        Checkpoint::load_with_vocab(&ck_path, &base.vocab)?
    } else {
        match (spec.variant, from) {
            (Variant::LearnableThenFrozen, Some(src)) => {
                let mut ck = Checkpoint::load_with_vocab(src, &base.vocab)?;
                let mut tc = train_config(cfg, EncoderMode::Frozen, spec.seed);
                tc.steps = ck.state.step + cfg.ablation.continue_frozen_after_learnable;
                ck.train = tc;
                ck
            }
            (Variant::LearnableThenFrozen, None) => {
                return Err(BenchError::Config("continuation cell needs its learnable checkpoint".into()))
            }
            (v, _) => {
                let mode = if v == Variant::Frozen { EncoderMode::Frozen } else { EncoderMode::Learnable };
                Checkpoint::new(base.clone(), train_config(cfg, mode, spec.seed))
            }
        }
    };
    let train_data = TrainData::from_samples(&ck.model, &data.train)?;
    train_checkpoint(&mut ck, &train_data, Some(&dir), cfg.train.save_every)?;
    let bytes = ck.to_bytes();
    let checkpoint_hash = hex16(&bytes);

    let (_cases, scores, words) = evaluate_localization(&ck.model, &data.eval, table, levels, cfg.eval.min_occurrences)?;
    let scores_path = dir.join("scores.csv");
    write_scores_csv(&scores, &scores_path)?;
    write_words_csv(&words, &dir.join("words.csv"))?;
    let generative = if cfg.eval.generative { Some(evaluate_generative(cfg, &ck.model, data, spec.seed)?) } else { None };
    let rel = scores_path.strip_prefix(out).unwrap_or(&scores_path).display().to_string();
    Ok(CellReport {
        regime: spec.regime,
        variant: spec.variant,
        run: spec.run,
        seed: spec.seed,
        status: CellStatus::Ok,
        steps: ck.state.step,
        null_uses: ck.state.null_uses,
        skipped_captions: train_data.skipped,
        localization: Some(ScoreSummary::of(&scores)),
        per_class: ScoreSummary::per_class(&scores),
        words,
        generative,
        checkpoint_hash,
        scores_csv: rel,
    })
}

pub fn write_words_csv(words: &WordRanking, path: &Path) -> Result<()> {
    let mut text = String::from("class,rank,word,mean_cnr,occurrences\n");
    for (class, rows) in words {
        for (i, r) in rows.iter().enumerate() {
            text.push_str(&format!("{class},{},{},{},{}\n", i + 1, r.word, r.mean_cnr, r.occurrences));
        }
    }
    fs::write(path, text).map_err(|e| BenchError::io(path, e))
}

fn aggregate(cells: &[CellReport]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(Variability, Variant), Vec<&CellReport>> = BTreeMap::new();
    for c in cells.iter().filter(|c| c.status == CellStatus::Ok) {
        groups.entry((c.regime, c.variant)).or_default().push(c);
    }
    groups
        .into_iter()
        .map(|((regime, variant), cs)| {
            let loc = |f: fn(&ScoreSummary) -> f64| {
                MeanStd::of(&cs.iter().filter_map(|c| c.localization.as_ref().map(f)).collect::<Vec<_>>())
            };
            let generative = |f: fn(&Generative) -> f64| {
                let v: Vec<f64> = cs.iter().filter_map(|c| c.generative.as_ref().map(f)).collect();
                (!v.is_empty()).then(|| MeanStd::of(&v))
            };
            Aggregate {
                regime,
                variant,
                cnr: loc(|s| s.cnr),
                cnr_abs: loc(|s| s.cnr_abs),
                auc: loc(|s| s.auc),
                top1: loc(|s| s.top1),
                frechet: generative(|g| g.frechet),
                diversity: generative(|g| g.diversity),
                probe_auc: generative(|g| g.probe_auc_mean),
            }
        })
        .collect()
}

fn write_cells_csv(report: &Report, path: &Path) -> Result<()> {
    let mut text = String::from("regime,variant,run,seed,status,steps,n,cnr,cnr_abs,auc,top1,frechet,diversity,probe_auc\n");
    for c in &report.cells {
        let l = c.localization.clone().unwrap_or_default();
        let g = c.generative.clone();
        let gf = |f: fn(&Generative) -> f64| g.as_ref().map(|g| f(g).to_string()).unwrap_or_default();
        let status = match &c.status {
            CellStatus::Ok => "ok".to_string(),
            CellStatus::Failed(_) => "failed".to_string(),
        };
        text.push_str(&format!(
            "{},{},{},{},{status},{},{},{},{},{},{},{},{},{}\n",
            c.regime,
            c.variant.as_str(),
            c.run,
            c.seed,
            c.steps,
            l.n,
            l.cnr,
            l.cnr_abs,
            l.auc,
            l.top1,
            gf(|g| g.frechet),
            gf(|g| g.diversity),
            gf(|g| g.probe_auc_mean),
        ));
    }
    fs::write(path, text).map_err(|e| BenchError::io(path, e))
}

fn failed(spec: &CellSpec, msg: String) -> CellReport {
    log::error!("{} {} run {} failed: {msg}", spec.regime, spec.variant.as_str(), spec.run);
    CellReport {
        regime: spec.regime,
        variant: spec.variant,
        run: spec.run,
        seed: spec.seed,
        status: CellStatus::Failed(msg),
        steps: 0,
        null_uses: 0,
        skipped_captions: 0,
        localization: None,
        per_class: BTreeMap::new(),
        words: BTreeMap::new(),
        generative: None,
        checkpoint_hash: String::new(),
        scores_csv: String::new(),
    }
}

/// Runs every cell, writing `report.json`, `cells.csv` and per-cell outputs
/// under `out`. Completed cells (with a `cell.json`) are reused; a failing
/// cell is recorded and the matrix continues.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Report> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| BenchError::io(out, e))?;
    write_json(&out.join("config.json"), cfg)?;
    let table = KeywordTable::default();
    let mut cells = Vec::new();
    let mut probe_real = BTreeMap::new();
    let mut corpus_hashes = BTreeMap::new();
    for &regime in &cfg.regimes {
        let data = match load_regime(cfg, regime, &table) {
            Ok(d) => d,
            Err(e) => {
                for (run, &seed) in cfg.seeds.iter().enumerate() {
                    for &m in &cfg.modes {
                        cells.push(failed(&CellSpec { regime, variant: m.into(), run, seed }, e.to_string()));
                    }
                }
                continue;
            }
        };
        corpus_hashes.insert(regime, data.corpus_hash.clone());
        probe_real.insert(regime, data.probe_real.clone());
        for (run, &seed) in cfg.seeds.iter().enumerate() {
            let base = prepare_model(
                &data.train,
                &VocabConfig::default(),
                &PretrainConfig { seed, ..PretrainConfig::default() },
                |_| {},
                seed,
            );
            let mut variants: Vec<Variant> = cfg.modes.iter().map(|&m| m.into()).collect();
            if cfg.ablation.continue_frozen_after_learnable > 0 && cfg.modes.contains(&EncoderMode::Learnable) {
                variants.push(Variant::LearnableThenFrozen);
            }
            for variant in variants {
                let spec = CellSpec { regime, variant, run, seed };
                let dir = cell_dir(out, &spec);
                let done = dir.join("cell.json");
                if let Ok(text) = fs::read_to_string(&done) {
                    if let Ok(prev) = serde_json::from_str::<CellReport>(&text) {
                        if prev.status == CellStatus::Ok {
                            cells.push(prev);
                            continue;
                        }
                    }
                }
                let result = match &base {
                    Ok(model) => {
                        let src = cell_dir(out, &CellSpec { regime, variant: Variant::Learnable, run, seed }).join("checkpoint.bin");
                        let from = (variant == Variant::LearnableThenFrozen).then_some(src.as_path());
                        run_cell(cfg, &spec, model, &data, &table, &cfg.eval.noise_levels, out, from)
                    }
                    Err(e) => Err(BenchError::Config(format!("model preparation failed: {e}"))),
                };
                let cell = match result {
                    Ok(c) => {
                        write_json(&done, &c)?;
                        c
                    }
                    Err(e) => failed(&spec, e.to_string()),
                };
                cells.push(cell);
            }
        }
    }
    let report = Report {
        provenance: Provenance {
            config_hash: cfg.hash(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            corpus_hashes,
        },
        aggregates: aggregate(&cells),
        cells,
        probe_real_auc: probe_real,
    };
    write_json(&out.join("report.json"), &report)?;
    write_cells_csv(&report, &out.join("cells.csv"))?;
    let mut f = fs::File::create(out.join("summary.txt")).map_err(|e| BenchError::io(out.join("summary.txt"), e))?;
    for a in &report.aggregates {
        writeln!(
            f,
            "{} {}: cnr {:.4}±{:.4} auc {:.4}±{:.4} top1 {:.4} cnr_abs {:.4} (n={})",
            a.regime,
            a.variant.as_str(),
            a.cnr.mean,
            a.cnr.std,
            a.auc.mean,
            a.auc.std,
            a.top1.mean,
            a.cnr_abs.mean,
            a.cnr.n
        )
        .map_err(|e| BenchError::io(out.join("summary.txt"), e))?;
    }
    Ok(report)
}
