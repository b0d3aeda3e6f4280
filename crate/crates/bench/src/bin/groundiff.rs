use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use groundiff::atlas::{atlas_for_sampling, default_noise_levels, extract_atlas};
use groundiff::corpus::{build_corpus, filter_eval_set, Corpus, CorpusOptions, SceneSpec, Split, SplitSizes, Variability};
use groundiff::diffusion::checkpoint::Checkpoint;
use groundiff::diffusion::model::Model;
use groundiff::diffusion::train::{train_steps, TrainConfig, TrainData};
use groundiff::grounding::{export_cases, load_cases};
use groundiff::imaging::RgbImage;
use groundiff::keywords::KeywordTable;
use groundiff::metrics::{
    diversity, frechet_distance, score_cases, write_scores_csv, FeatureExtractor, SamplingOptions, ScoreSummary,
};
use groundiff::pipeline::{grounding_cases, prepare_model};
use groundiff::text::{EncoderMode, PretrainConfig, VocabConfig};
use groundiff_bench::config::ExperimentConfig;
use groundiff_bench::experiment::run_experiment;
use groundiff_bench::overlay::render_overlay;
use groundiff_bench::words::{atlas_samples, rank_words};

#[derive(Parser)]
#[command(name = "groundiff", version, about = "Toy text-to-image diffusion with attention-based phrase grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic grounded-caption corpora.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Train a denoiser on a corpus.
    Train(TrainArgs),
    /// Sample an image from a prompt.
    Sample(SampleArgs),
    /// Extract the attention atlas of an image/caption pair.
    Atlas(AtlasArgs),
    #[command(subcommand)]
    Grounding(GroundingCmd),
    #[command(subcommand)]
    Metrics(MetricsCmd),
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Subcommand)]
enum CorpusCmd {
    Gen(CorpusGen),
}

#[derive(Args)]
struct CorpusGen {
    /// Scene specification TOML; built-in defaults when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    val: usize,
    #[arg(long, default_value_t = 1000)]
    test: usize,
    #[arg(long, default_value = "high")]
    variability: Variability,
    #[arg(long, default_value_t = 0.10)]
    empty_fraction: f64,
    /// Directory of per-class caption templates for the middle regime.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    keywords: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "frozen")]
    mode: EncoderMode,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    uncond_drop_prob: Option<f64>,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Checkpoint path; `loss.csv` is written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 75)]
    steps: usize,
    #[arg(long, default_value_t = 4.0)]
    scale: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the atlas averaged over the sampling trajectory.
    #[arg(long)]
    atlas: Option<PathBuf>,
}

#[derive(Args)]
struct AtlasArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    caption: String,
    /// Number of noise levels spread over the schedule.
    #[arg(long, default_value_t = 8)]
    levels: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum GroundingCmd {
    /// Export grounding cases of a corpus split.
    Cases {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        keywords: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum MetricsCmd {
    /// Score exported cases.
    Eval {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fréchet feature distance between two directories of PNGs.
    Fid {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synth: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mean pairwise MS-SSIM of samples per prompt (one prompt per line).
    Diversity {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value_t = 4)]
        group_size: usize,
        #[arg(long, default_value_t = 75)]
        steps: usize,
        #[arg(long, default_value_t = 4.0)]
        scale: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Run the experiment matrix.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class word ranking by CNR on the filtered test split.
    Words {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 25)]
        min_occ: usize,
        #[arg(long, default_value_t = 3)]
        top: usize,
    },
    /// Heatmap overlay of one test sample and class.
    Overlay {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        class: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn keywords(path: Option<&Path>) -> anyhow::Result<KeywordTable> {
    Ok(match path {
        Some(p) => KeywordTable::load(p)?,
        None => KeywordTable::default(),
    })
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    Ok(Checkpoint::load(path)?.model)
}

fn save_unit_image(values: &[f32], side: usize, out: &Path) -> anyhow::Result<()> {
    RgbImage::from_unit(side, side, values).save_png(out)?;
    Ok(())
}

fn corpus_gen(a: CorpusGen) -> anyhow::Result<()> {
    let spec = match &a.spec {
        Some(p) => SceneSpec::from_toml(&fs::read_to_string(p).with_context(|| p.display().to_string())?)?,
        None => SceneSpec::default(),
    };
    let mut opts = CorpusOptions {
        variability: a.variability,
        empty_fraction: a.empty_fraction,
        force: a.force,
        keywords: keywords(a.keywords.as_deref())?,
        ..CorpusOptions::default()
    };
    if let Some(dir) = &a.templates {
        opts.templates = groundiff::corpus::Templates::load_dir(dir)?;
    }
    let sizes = SplitSizes { train: a.train, val: a.val, test: a.test };
    let m = build_corpus(&spec, sizes, a.seed, &opts, &a.out)?;
    println!("{} samples written to {} (hash {})", m.samples.len(), a.out.display(), m.hash());
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let corpus = Corpus::open(&a.corpus)?;
    let samples = corpus.load_split(Split::Train)?;
    let mut ck = match &a.resume {
        Some(p) => Checkpoint::load(p)?,
        None => {
            let pretrain = PretrainConfig { seed: a.seed, ..PretrainConfig::default() };
            let model = prepare_model(&samples, &VocabConfig::default(), &pretrain, |_| {}, a.seed)?;
            Checkpoint::new(model, TrainConfig { seed: a.seed, ..TrainConfig::for_mode(a.mode) })
        }
    };
    ck.train.encoder_mode = a.mode;
    if let Some(s) = a.steps {
        ck.train.steps = s;
    }
    if let Some(lr) = a.lr {
        ck.train.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        ck.train.batch_size = b;
    }
    if let Some(p) = a.uncond_drop_prob {
        ck.train.uncond_drop_prob = p;
    }
    let data = TrainData::from_samples(&ck.model, &samples)?;
    let loss_csv = a.out.with_file_name("loss.csv");
    let cfg = ck.train.clone();
    let stats = train_steps(&mut ck.model, &mut ck.state, &cfg, &data, cfg.steps, Some(&loss_csv))?;
    ck.save(&a.out)?;
    let last = stats.losses.last().map(|l| l.1).unwrap_or(f32::NAN);
    println!("trained to step {} (final loss {last:.5}); checkpoint {}", ck.state.step, a.out.display());
    Ok(())
}

fn sample(a: SampleArgs) -> anyhow::Result<()> {
    let model = load_model(&a.ckpt)?;
    let side = model.config.latent.image_size;
    let image = match &a.atlas {
        Some(path) => {
            let (img, atlas) = atlas_for_sampling(&model, &a.prompt, a.steps, a.scale, a.seed)?;
            atlas.save(path)?;
            img
        }
        None => model.sample(&a.prompt, a.steps, a.scale, a.seed)?,
    };
    save_unit_image(&image, side, &a.out)
}

fn atlas(a: AtlasArgs) -> anyhow::Result<()> {
    let model = load_model(&a.ckpt)?;
    let image = RgbImage::load_png(&a.image)?;
    let levels = default_noise_levels(model.schedule().steps, a.levels);
    let id = a.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let atlas = extract_atlas(&model, &image, &id, &a.caption, &levels)?;
    atlas.save(&a.out)?;
    Ok(())
}

fn fid(real: &Path, synth: &Path, seed: u64) -> anyhow::Result<()> {
    let load = |dir: &Path| -> anyhow::Result<(Vec<Vec<f32>>, usize)> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| dir.display().to_string())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .collect();
        paths.sort();
        let mut side = 0;
        let mut out = Vec::new();
        for p in paths {
            let img = RgbImage::load_png(&p)?;
            if img.width != img.height || (side != 0 && img.width != side) {
                bail!("{}: images must be square and equally sized", p.display());
            }
            side = img.width;
            out.push(img.to_unit());
        }
        if out.len() < 2 {
            bail!("{}: need at least two PNG images", dir.display());
        }
        Ok((out, side))
    };
    let (r, sr) = load(real)?;
    let (s, ss) = load(synth)?;
    if sr != ss {
        bail!("real images are {sr}px, synthetic {ss}px");
    }
    let fx = FeatureExtractor::new(seed);
    let d = frechet_distance(&fx.features(&r, sr)?, &fx.features(&s, ss)?)?;
    println!("{d}");
    Ok(())
}

fn run() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Corpus(CorpusCmd::Gen(a)) => corpus_gen(a)?,
        Command::Train(a) => train(a)?,
        Command::Sample(a) => sample(a)?,
        Command::Atlas(a) => atlas(a)?,
        Command::Grounding(GroundingCmd::Cases { ckpt, corpus, split, keywords: kw, out }) => {
            let model = load_model(&ckpt)?;
            let table = keywords(kw.as_deref())?;
            let samples = filter_eval_set(&Corpus::open(&corpus)?, split, &table)?;
            let cases = grounding_cases(&model, &samples, &table, None)?;
            export_cases(&cases, &out)?;
            println!("{} cases written to {}", cases.len(), out.display());
        }
        Command::Metrics(MetricsCmd::Eval { cases, out }) => {
            let scores = score_cases(&load_cases(&cases)?)?;
            write_scores_csv(&scores, &out)?;
            let s = ScoreSummary::of(&scores);
            println!("n {} cnr {:.4} cnr_abs {:.4} auc {:.4} top1 {:.4}", s.n, s.cnr, s.cnr_abs, s.auc, s.top1);
        }
        Command::Metrics(MetricsCmd::Fid { real, synth, seed }) => fid(&real, &synth, seed)?,
        Command::Metrics(MetricsCmd::Diversity { ckpt, prompts, group_size, steps, scale, seed }) => {
            let model = load_model(&ckpt)?;
            let text = fs::read_to_string(&prompts).with_context(|| prompts.display().to_string())?;
            let prompts: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
            let opts = SamplingOptions { n_steps: steps, guidance: scale, seed };
            println!("{}", diversity(&model, &prompts, group_size, 3, &opts)?);
        }
        Command::Bench(BenchCmd::Run { config, out }) => {
            let cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return Ok(ExitCode::from(1));
                }
            };
            let report = run_experiment(&cfg, &out)?;
            for a in &report.aggregates {
                println!(
                    "{} {}: cnr {:.4}±{:.4} auc {:.4}±{:.4} top1 {:.4}±{:.4}",
                    a.regime,
                    a.variant.as_str(),
                    a.cnr.mean,
                    a.cnr.std,
                    a.auc.mean,
                    a.auc.std,
                    a.top1.mean,
                    a.top1.std
                );
            }
            let failed = report.failed_cells();
            if failed > 0 {
                eprintln!("{failed} of {} cells failed; see {}", report.cells.len(), out.join("report.json").display());
                return Ok(ExitCode::from(2));
            }
        }
        Command::Bench(BenchCmd::Words { ckpt, corpus, min_occ, top }) => {
            let model = load_model(&ckpt)?;
            let table = KeywordTable::default();
            let samples = filter_eval_set(&Corpus::open(&corpus)?, Split::Test, &table)?;
            let items = atlas_samples(&model, &samples, None)?;
            println!("class,rank,word,mean_cnr,occurrences");
            for (class, rows) in rank_words(&items, min_occ, top)? {
                for (i, r) in rows.iter().enumerate() {
                    println!("{class},{},{},{:.4},{}", i + 1, r.word, r.mean_cnr, r.occurrences);
                }
            }
        }
        Command::Bench(BenchCmd::Overlay { ckpt, corpus, sample, class, out }) => {
            let model = load_model(&ckpt)?;
            let corpus = Corpus::open(&corpus)?;
            let rec = corpus.record(&sample).with_context(|| format!("no sample {sample} in corpus"))?;
            let s = corpus.load(rec)?;
            let table = KeywordTable::default();
            let cases = grounding_cases(&model, std::slice::from_ref(&s), &table, None)?;
            let case = cases.iter().find(|c| c.class == class).with_context(|| format!("{sample} has no {class}"))?;
            render_overlay(&s.image, &case.heatmap, model.z(), &case.mask, &out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
