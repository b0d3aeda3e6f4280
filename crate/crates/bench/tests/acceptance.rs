//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! `GROUNDIFF_ACCEPTANCE_SCALE` picks the budget: `desk` (default), `smoke`
//! (minutes, for plumbing only) or `full` (the nominal step counts).
//! Correctness criteria (1-7, 10-12) abort the run when they fail. The
//! experimental outcomes (8, 9) are reported without failing the target
//! unless `GROUNDIFF_ACCEPTANCE_STRICT=1`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use groundiff::atlas::{atlas_for_sampling, default_noise_levels, extract_atlas};
use groundiff::corpus::{build_corpus, Corpus, CorpusOptions, SceneSpec, Split, SplitSizes, Variability};
use groundiff::diffusion::checkpoint::Checkpoint;
use groundiff::diffusion::model::{Model, ModelConfig};
use groundiff::diffusion::train::{build_loss, draw_step, TrainConfig, TrainData};
use groundiff::metrics::{auc_roc, cnr, cnr_abs, frechet_distance, ms_ssim, top1, FeatureExtractor};
use groundiff::pipeline::prepare_model;
use groundiff::text::{build_vocab, param_checksum, EncoderMode, PretrainConfig, VocabConfig};
use groundiff_bench::config::{EvalOptions, ExperimentConfig, TrainOverrides};
use groundiff_bench::experiment::{run_experiment, CellStatus, Report, Variant};
use groundiff_bench::words::{fraction_with_word, EOS_ROW};
use groundiff_nn::{Graph, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scale {
    Smoke,
    Desk,
    Full,
}

struct Budget {
    train: usize,
    test: usize,
    steps_frozen: usize,
    steps_learnable: usize,
    learning_rate: f32,
    eval: EvalOptions,
}

impl Scale {
    fn from_env() -> Self {
        match std::env::var("GROUNDIFF_ACCEPTANCE_SCALE").as_deref() {
            Ok("smoke") => Scale::Smoke,
            Ok("full") => Scale::Full,
            _ => Scale::Desk,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Scale::Smoke => "smoke",
            Scale::Desk => "desk",
            Scale::Full => "full",
        }
    }

    fn budget(self) -> Budget {
        let eval = EvalOptions::default();
        match self {
            Scale::Smoke => Budget {
                train: 300,
                test: 120,
                steps_frozen: 40,
                steps_learnable: 60,
                learning_rate: 1e-3,
                eval: EvalOptions {
                    min_occurrences: 5,
                    fid_samples: 24,
                    diversity_prompts: 3,
                    sampling_steps: 10,
                    probe_steps: 300,
                    probe_samples_per_class: 4,
                    ..eval
                },
            },
            Scale::Desk => Budget {
                train: 5000,
                test: 500,
                steps_frozen: 2000,
                steps_learnable: 3000,
                learning_rate: 1e-3,
                eval: EvalOptions {
                    fid_samples: 200,
                    diversity_prompts: 20,
                    sampling_steps: 50,
                    probe_samples_per_class: 16,
                    ..eval
                },
            },
            Scale::Full => Budget {
                train: 5000,
                test: 1000,
                steps_frozen: 10_000,
                steps_learnable: 20_000,
                learning_rate: 1e-4,
                eval,
            },
        }
    }
}

struct Outcome {
    id: &'static str,
    pass: bool,
    hard: bool,
    detail: String,
}

struct Suite {
    outcomes: Vec<Outcome>,
    log: PathBuf,
}

impl Suite {
    fn record(&mut self, id: &'static str, hard: bool, pass: bool, detail: String) {
        let line = format!("criterion {id:<3} {}  {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        let mut text = fs::read_to_string(&self.log).unwrap_or_default();
        text.push_str(&line);
        text.push('\n');
        fs::write(&self.log, text).expect("acceptance log is writable");
        self.outcomes.push(Outcome { id, pass, hard, detail });
    }
}

fn random_case(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    loop {
        let h: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        if m.iter().any(|&b| b) && m.iter().any(|&b| !b) {
            return (h, m);
        }
    }
}

fn auc_pairs(h: &[f64], m: &[bool]) -> f64 {
    let (mut credit, mut pairs) = (0.0, 0.0);
    for hi in h.iter().zip(m).filter(|p| *p.1).map(|p| *p.0) {
        for (j, &hj) in h.iter().enumerate() {
            if m[j] {
                continue;
            }
            pairs += 1.0;
            if hi > hj {
                credit += 1.0;
            } else if hi == hj {
                credit += 0.5;
            }
        }
    }
    credit / pairs
}

fn cnr_direct(h: &[f64], m: &[bool]) -> f64 {
    let inside: Vec<f64> = h.iter().zip(m).filter(|p| *p.1).map(|p| *p.0).collect();
    let outside: Vec<f64> = h.iter().zip(m).filter(|p| !*p.1).map(|p| *p.0).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let mu = mean(v);
        v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64
    };
    (mean(&inside) - mean(&outside)) / (var(&inside) + var(&outside) + groundiff::metrics::CNR_EPS).sqrt()
}

fn criterion_1(s: &mut Suite) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut auc_err, mut cnr_err) = (0.0f64, 0.0f64);
    for k in 0..200 {
        let (mut h, m) = random_case(&mut rng, 64);
        if k % 4 == 0 {
            // coarse values force ties
            h.iter_mut().for_each(|v| *v = (*v * 4.0).floor());
        }
        auc_err = auc_err.max((auc_roc(&h, &m).unwrap() - auc_pairs(&h, &m)).abs());
        cnr_err = cnr_err.max((cnr(&h, &m).unwrap() - cnr_direct(&h, &m)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    s.record(
        "1",
        true,
        auc_err <= 1e-12 && cnr_err <= 1e-12 && secs < 10.0,
        format!("max |auc - pairwise| {auc_err:.1e}, max |cnr - direct| {cnr_err:.1e}, {secs:.2}s"),
    );
}

fn criterion_2(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut abs_ok, mut affine_err, mut flip_err) = (true, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (h, m) = random_case(&mut rng, 64);
        let c = cnr(&h, &m).unwrap();
        abs_ok &= cnr_abs(&h, &m).unwrap() == c.abs();
        let a = rng.random_range(0.1..10.0);
        let b = rng.random_range(-5.0..5.0);
        let t: Vec<f64> = h.iter().map(|v| a * v + b).collect();
        let ct = cnr(&t, &m).unwrap();
        affine_err = affine_err.max((ct - c).abs() / c.abs().max(1e-12));
        let f: Vec<f64> = h.iter().map(|v| 1.0 - v).collect();
        flip_err = flip_err.max((cnr(&f, &m).unwrap() + c).abs());
    }
    s.record(
        "2",
        true,
        abs_ok && affine_err <= 1e-6 && flip_err <= 1e-9,
        format!("cnr_abs exact {abs_ok}, affine rel err {affine_err:.1e}, flip err {flip_err:.1e}"),
    );
}

fn criterion_3(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut same = true;
    for _ in 0..200 {
        let (h, m) = random_case(&mut rng, 64);
        let (a, t) = (auc_roc(&h, &m).unwrap(), top1(&h, &m).unwrap());
        for f in [f64::exp as fn(f64) -> f64, |v: f64| v * v * v] {
            let g: Vec<f64> = h.iter().map(|&v| f(v)).collect();
            same &= auc_roc(&g, &m).unwrap() == a && top1(&g, &m).unwrap() == t;
        }
    }
    s.record("3", true, same, format!("auc and top1 unchanged under exp and cube: {same}"));
}

fn criterion_4(s: &mut Suite, model: &Model, corpus: &Corpus) {
    let test = corpus.load_split(Split::Test).unwrap();
    let levels = default_noise_levels(model.schedule().steps, 8);
    let mut worst = 0.0f64;
    let mut count = 0;
    for smp in test.iter().filter(|x| model.tokenize(&x.caption).is_ok()).take(100) {
        let a = extract_atlas(model, &smp.image, &smp.id, &smp.caption, &levels).unwrap();
        worst = a.token_sums().iter().fold(worst, |w, v| w.max((v - 1.0).abs()));
        count += 1;
    }
    let mut sampled = 0;
    for (i, smp) in test.iter().filter(|x| model.tokenize(&x.caption).is_ok()).take(10).enumerate() {
        let (_, a) = atlas_for_sampling(model, &smp.caption, 20, 4.0, i as u64).unwrap();
        worst = a.token_sums().iter().fold(worst, |w, v| w.max((v - 1.0).abs()));
        sampled += 1;
    }
    s.record(
        "4",
        true,
        count == 100 && sampled == 10 && worst <= 1e-4,
        format!("{count} corpus + {sampled} sampling atlases, max |token sum - 1| {worst:.1e}"),
    );
}

fn criterion_5(s: &mut Suite, corpus: &Corpus) {
    let captions: Vec<String> = corpus.records(Split::Train).iter().map(|r| r.caption.clone()).collect();
    let vocab = build_vocab(&captions, &VocabConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for state in 0..50u64 {
        let model = Model::new(ModelConfig::new(vocab.len()), vocab.clone(), 1000 + state).unwrap();
        let caption = captions.iter().find(|c| model.tokenize(c).is_ok()).unwrap();
        let seq = model.tokenize(caption).unwrap();
        let cond = model.conditioning(&[&seq]).unwrap();
        let x: Vec<f32> = (0..model.config.latent.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let t = [rng.random_range(0..model.schedule().steps)];
        let ec = model.predict_eps(&x, &t, &cond, None).unwrap();
        let eu = model.predict_eps(&x, &t, &model.null_conditioning(1), None).unwrap();
        for (scale, want) in [(1.0, &ec), (0.0, &eu)] {
            let got = model.guided_eps(&x, &t, &cond, scale, None).unwrap();
            let num = got.iter().zip(want.iter()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
            let den = want.iter().map(|b| (*b as f64).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(num / den);
        }
    }
    s.record("5", true, worst <= 1e-6, format!("50 model states, max relative error {worst:.1e}"));
}

fn criterion_6(s: &mut Suite, corpus: &Corpus) {
    let start = Instant::now();
    let samples: Vec<_> = corpus.load_split(Split::Train).unwrap().into_iter().take(64).collect();
    let captions: Vec<String> = corpus.records(Split::Train).iter().map(|r| r.caption.clone()).collect();
    let vocab = build_vocab(&captions, &VocabConfig::default()).unwrap();
    let mut cfg = ModelConfig::new(vocab.len());
    cfg.unet.widths = [8, 8, 16];
    cfg.unet.norm_groups = 4;
    cfg.unet.time_dim = 16;
    cfg.unet.attn_dim = 8;
    cfg.unet.cond_dim = 16;
    cfg.encoder.d_model = 16;
    cfg.encoder.mlp_hidden = 16;
    let model = Model::new(cfg, vocab, 6).unwrap();
    let data = TrainData::from_samples(&model, &samples).unwrap();
    let tc = TrainConfig { batch_size: 4, uncond_drop_prob: 1.0, seed: 6, ..TrainConfig::for_mode(EncoderMode::Learnable) };
    let mut draw = draw_step(&tc, &data, model.schedule().steps, model.config.latent.len(), 0);
    draw.drop[0] = true;
    let (pu, pe) = (model.unet_params.cast::<f64>(), model.encoder_params.cast::<f64>());
    let loss_of = |pu: &ParamSet<f64>, pe: &ParamSet<f64>| {
        let mut g = Graph::<f64>::new();
        let (loss, _, _) = build_loss(&mut g, &model, pu, pe, EncoderMode::Learnable, &data, None, &draw).unwrap();
        g.scalar(loss)
    };
    let mut g = Graph::<f64>::new();
    let (loss, bu, be) = build_loss(&mut g, &model, &pu, &pe, EncoderMode::Learnable, &data, None, &draw).unwrap();
    let mut grads = g.backward(loss);
    let (gu, ge) = (bu.gradients(&mut grads), be.unwrap().gradients(&mut grads));
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let h = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let in_unet = rng.random_bool(0.5);
        let (set, gs) = if in_unet { (&pu, &gu) } else { (&pe, &ge) };
        let pi = rng.random_range(0..set.len());
        let j = rng.random_range(0..set.iter().nth(pi).unwrap().data.len());
        let analytic = gs[pi].as_ref().map(|v| v[j]).unwrap_or(0.0);
        let shifted = |d: f64| {
            let (mut a, mut b) = (pu.clone(), pe.clone());
            let target = if in_unet { &mut a } else { &mut b };
            target.iter_mut().nth(pi).unwrap().data[j] += d;
            loss_of(&a, &b)
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        worst = worst.max((fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6));
    }
    let secs = start.elapsed().as_secs_f64();
    s.record(
        "6",
        true,
        worst <= 1e-4 && secs < 300.0,
        format!("100 parameters, max relative error {worst:.1e}, {secs:.1}s"),
    );
}

fn criterion_7(s: &mut Suite, out: &Path, corpus: &Corpus, report: &Report) {
    let train = corpus.load_split(Split::Train).unwrap();
    let mut details = Vec::new();
    let mut pass = true;
    for cell in report.cells.iter().filter(|c| c.variant == Variant::Frozen && c.regime == Variability::High) {
        let pre = prepare_model(&train, &VocabConfig::default(), &PretrainConfig { seed: cell.seed, ..Default::default() }, |_| {}, cell.seed)
            .unwrap();
        let ck = Checkpoint::load(&out.join("high/frozen").join(format!("run{}", cell.run)).join("checkpoint.bin")).unwrap();
        let same = param_checksum(&ck.model.encoder_params) == param_checksum(&pre.encoder_params);
        pass &= same && ck.state.step >= 2000.min(ck.train.steps);
        details.push(format!("run{} after {} steps: {}", cell.run, ck.state.step, if same { "identical" } else { "CHANGED" }));
    }
    pass &= !details.is_empty();
    s.record("7", true, pass, format!("encoder checksum {}", details.join(", ")));
}

fn corpus_at(root: &Path, regime: Variability, b: &Budget) -> Corpus {
    let dir = root.join(format!("corpus-{regime}"));
    let sizes = SplitSizes { train: b.train, val: 0, test: b.test };
    if let Ok(c) = Corpus::open(&dir) {
        if c.manifest.sizes == sizes && c.manifest.variability == regime {
            return c;
        }
    }
    let opts = CorpusOptions { variability: regime, force: true, ..CorpusOptions::default() };
    build_corpus(&SceneSpec::default(), sizes, 7, &opts, &dir).unwrap();
    Corpus::open(&dir).unwrap()
}

fn experiment(corpora: BTreeMap<Variability, PathBuf>, regimes: Vec<Variability>, seeds: Vec<u64>, b: &Budget, generative: bool) -> ExperimentConfig {
    ExperimentConfig {
        corpora,
        modes: vec![EncoderMode::Frozen, EncoderMode::Learnable],
        regimes,
        n_runs: seeds.len(),
        seeds,
        train: TrainOverrides {
            steps_frozen: b.steps_frozen,
            steps_learnable: b.steps_learnable,
            learning_rate: b.learning_rate,
            ..TrainOverrides::default()
        },
        ablation: Default::default(),
        eval: EvalOptions { generative, ..b.eval.clone() },
    }
}

fn localization_key(r: &Report) -> Vec<(String, [u64; 4])> {
    r.cells
        .iter()
        .map(|c| {
            let l = c.localization.clone().unwrap_or_default();
            (format!("{}/{}/{}", c.regime, c.variant.as_str(), c.run), [l.cnr.to_bits(), l.cnr_abs.to_bits(), l.auc.to_bits(), l.top1.to_bits()])
        })
        .collect()
}

fn main() -> ExitCode {
    let scale = Scale::from_env();
    let strict = std::env::var("GROUNDIFF_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let b = scale.budget();
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(scale.name());
    fs::create_dir_all(&root).unwrap();
    let log = root.join("criteria.txt");
    let _ = fs::remove_file(&log);
    let mut s = Suite { outcomes: Vec::new(), log };
    println!("acceptance scale: {} (artifacts under {})", scale.name(), root.display());

    criterion_1(&mut s);
    criterion_2(&mut s);
    criterion_3(&mut s);

    let high = corpus_at(&root, Variability::High, &b);

    // flagship matrix: both modes, two runs, high variability
    let corpora: BTreeMap<Variability, PathBuf> =
        [Variability::High, Variability::Middle, Variability::Low].into_iter().map(|r| (r, root.join(format!("corpus-{r}")))).collect();
    let flagship = experiment(corpora.clone(), vec![Variability::High], vec![0, 1], &b, true);
    let out8 = root.join("flagship");
    let t8 = Instant::now();
    let report = run_experiment(&flagship, &out8).unwrap();
    let t8 = t8.elapsed().as_secs_f64();
    assert_eq!(report.failed_cells(), 0, "flagship cells failed: {:?}", report.cells.iter().map(|c| &c.status).collect::<Vec<_>>());

    let frozen0 = Checkpoint::load(&out8.join("high/frozen/run0/checkpoint.bin")).unwrap();
    criterion_4(&mut s, &frozen0.model, &high);
    criterion_5(&mut s, &high);
    criterion_6(&mut s, &high);
    criterion_7(&mut s, &out8, &high, &report);

    let agg_f = report.aggregate(Variability::High, Variant::Frozen).unwrap().clone();
    let agg_l = report.aggregate(Variability::High, Variant::Learnable).unwrap().clone();
    s.record(
        "8a",
        false,
        agg_f.auc.mean >= 0.75 && agg_f.cnr.mean >= 0.5,
        format!(
            "frozen mean AUC {:.3} (>= 0.75), mean CNR {:.3} (>= 0.5), top1 {:.3}; {:.0}s",
            agg_f.auc.mean, agg_f.cnr.mean, agg_f.top1.mean, t8
        ),
    );
    let mut pairs = Vec::new();
    let mut all_better = true;
    for run in 0..flagship.n_runs {
        let f = report.cell(Variability::High, Variant::Frozen, run).and_then(|c| c.localization.clone()).unwrap();
        let l = report.cell(Variability::High, Variant::Learnable, run).and_then(|c| c.localization.clone()).unwrap();
        all_better &= f.cnr > l.cnr;
        pairs.push(format!("run{run} {:.3} vs {:.3}", f.cnr, l.cnr));
    }
    s.record("8b", false, all_better, format!("frozen vs learnable CNR: {}", pairs.join(", ")));
    let fractions: Vec<f64> = (0..flagship.n_runs)
        .map(|run| fraction_with_word(&report.cell(Variability::High, Variant::Learnable, run).unwrap().words, EOS_ROW))
        .collect();
    let eos = fractions.iter().sum::<f64>() / fractions.len() as f64;
    s.record("8c", false, eos >= 0.5, format!("learnable: EOS in the top 3 of {:.0}% of classes (per run {fractions:?})", 100.0 * eos));

    // variability regimes; the high regime reuses the flagship aggregates
    let mut regime_lines = vec![format!("high {:.3} vs {:.3}", agg_f.cnr.mean, agg_l.cnr.mean)];
    let mut regimes_ok = agg_f.cnr.mean > agg_l.cnr.mean;
    for regime in [Variability::Middle, Variability::Low] {
        corpus_at(&root, regime, &b);
    }
    let var_cfg = experiment(corpora.clone(), vec![Variability::Middle, Variability::Low], vec![0], &b, false);
    let var_report = run_experiment(&var_cfg, &root.join("variability")).unwrap();
    for regime in [Variability::Middle, Variability::Low] {
        let f = var_report.aggregate(regime, Variant::Frozen).map(|a| a.cnr.mean).unwrap_or(f64::NAN);
        let l = var_report.aggregate(regime, Variant::Learnable).map(|a| a.cnr.mean).unwrap_or(f64::NAN);
        regimes_ok &= f > l;
        regime_lines.push(format!("{regime} {f:.3} vs {l:.3}"));
    }
    s.record("9", false, regimes_ok && var_report.failed_cells() == 0, format!("frozen vs learnable mean CNR: {}", regime_lines.join(", ")));

    // generative sanity
    let test = high.load_split(Split::Test).unwrap();
    let x = test[0].image.to_unit();
    let side = test[0].image.width;
    let self_ssim = ms_ssim(&x, &x, side, side, 3, 3).unwrap();
    let fx = FeatureExtractor::new(0);
    let feats = fx.features(&test.iter().take(100).map(|s| s.image.to_unit()).collect::<Vec<_>>(), side).unwrap();
    let self_fd = frechet_distance(&feats, &feats).unwrap();
    let g0 = report.cell(Variability::High, Variant::Frozen, 0).and_then(|c| c.generative.clone()).unwrap();
    s.record(
        "10",
        true,
        (self_ssim - 1.0).abs() <= 1e-9 && self_fd <= 1e-6 && g0.frechet.is_finite() && g0.frechet < g0.frechet_noise,
        format!(
            "ms_ssim(x,x) {self_ssim:.12}, fd(X,X) {self_fd:.1e}, fd(real, frozen) {:.3} < fd(real, noise) {:.3}",
            g0.frechet, g0.frechet_noise
        ),
    );

    let real = report.probe_real_auc.get(&Variability::High).cloned().unwrap_or_default();
    let min_real = real.values().copied().fold(f64::INFINITY, f64::min);
    let mut emitted = true;
    let mut gen_lines = Vec::new();
    for v in [Variant::Frozen, Variant::Learnable] {
        let per: Vec<f64> = (0..flagship.n_runs)
            .filter_map(|run| report.cell(Variability::High, v, run).and_then(|c| c.generative.clone()))
            .map(|g| {
                emitted &= g.probe_auc.len() == real.len() && g.probe_auc.values().all(|a| a.is_finite());
                g.probe_auc_mean
            })
            .collect();
        emitted &= per.len() == flagship.n_runs;
        gen_lines.push(format!("{} generation AUC {:?}", v.as_str(), per.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>()));
    }
    s.record(
        "11",
        true,
        !real.is_empty() && min_real >= 0.95 && emitted,
        format!("real test min per-class AUC {min_real:.3} over {} classes; {}", real.len(), gen_lines.join("; ")),
    );

    // determinism: the flagship matrix again from scratch, same seeds
    let rerun_dir = root.join("flagship-rerun");
    let _ = fs::remove_dir_all(&rerun_dir);
    let rerun_cfg = ExperimentConfig { eval: EvalOptions { generative: false, ..flagship.eval.clone() }, ..flagship.clone() };
    let rerun = run_experiment(&rerun_cfg, &rerun_dir).unwrap();
    let same = localization_key(&rerun) == localization_key(&report)
        && report.cells.iter().zip(&rerun.cells).all(|(a, b)| a.checkpoint_hash == b.checkpoint_hash && a.status == CellStatus::Ok && b.status == CellStatus::Ok);
    s.record("12", true, same, format!("{} cells retrained; localization aggregates and checkpoints bit-identical: {same}", rerun.cells.len()));

    let hard_fail: Vec<&Outcome> = s.outcomes.iter().filter(|o| !o.pass && o.hard).collect();
    let soft_fail: Vec<&Outcome> = s.outcomes.iter().filter(|o| !o.pass && !o.hard).collect();
    println!(
        "acceptance: {} of {} criteria pass",
        s.outcomes.iter().filter(|o| o.pass).count(),
        s.outcomes.len()
    );
    for o in &soft_fail {
        println!("  not met (experimental outcome): {} {}", o.id, o.detail);
    }
    if !hard_fail.is_empty() || (strict && !soft_fail.is_empty()) {
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
