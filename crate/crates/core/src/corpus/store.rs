//! On-disk corpus layout: `corpus.json`, `manifest.jsonl`, `images/`, `masks/`.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_scene, generate_scene_with, render_caption, Sample, SceneObject, SceneSpec, Templates, Variability, EMPTY_CAPTION};
use crate::error::{Error, Result};
use crate::imaging::{BBox, Mask, RgbImage};
use crate::keywords::KeywordTable;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Clone, Debug)]
pub struct CorpusOptions {
    pub variability: Variability,
    /// Probability that a sample is an empty "no finding" scene.
    pub empty_fraction: f64,
    /// Overwrite an existing output directory.
    pub force: bool,
    pub templates: Templates,
    pub keywords: KeywordTable,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            variability: Variability::High,
            empty_fraction: 0.10,
            force: false,
            templates: Templates::default(),
            keywords: KeywordTable::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub class: String,
    pub bbox: BBox,
    pub mask_path: String,
    pub color: String,
    pub size_px: usize,
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: String,
    pub caption: String,
    pub variability: Variability,
    pub split: Split,
    pub objects: Vec<ObjectRecord>,
}

/// Corpus header (`corpus.json`) plus the per-sample records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub scene_spec: SceneSpec,
    pub rng_seed: u64,
    pub sizes: SplitSizes,
    pub empty_fraction: f64,
    pub variability: Variability,
    #[serde(skip)]
    pub samples: Vec<SampleRecord>,
}

impl CorpusManifest {
    /// SHA-256 over the header and every record, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("manifest serialises"));
        for s in &self.samples {
            h.update(serde_json::to_vec(s).expect("record serialises"));
            h.update(b"\n");
        }
        hex(&h.finalize())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic per-sample generator stream.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates sample `index` of a corpus in memory.
pub fn generate_sample(spec: &SceneSpec, sizes: &SplitSizes, seed: u64, index: usize, opts: &CorpusOptions) -> Result<Sample> {
    let mut rng = sample_rng(seed, index);
    let empty = rng.random_bool(opts.empty_fraction.clamp(0.0, 1.0));
    let scene = if empty { generate_scene_with(spec, 0, &mut rng)? } else { generate_scene(spec, &mut rng)? };
    let caption = if scene.objects.is_empty() {
        EMPTY_CAPTION.to_string()
    } else {
        let traits: Vec<_> = scene.objects.iter().map(|o| o.traits(spec.image_size)).collect();
        render_caption(&traits, opts.variability, &opts.templates, &opts.keywords, &mut rng)?
    };
    let split = sizes.split_of(index);
    Ok(Sample {
        id: format!("{}-{index:05}", split.as_str()),
        image: scene.image,
        objects: scene.objects,
        caption,
        variability: opts.variability,
        split,
    })
}

/// Generates the corpus and writes it under `out`.
pub fn build_corpus(spec: &SceneSpec, sizes: SplitSizes, seed: u64, opts: &CorpusOptions, out: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&opts.empty_fraction) {
        return Err(Error::Argument(format!("empty fraction {} outside [0, 1]", opts.empty_fraction)));
    }
    if out.exists() {
        if !opts.force {
            return Err(Error::Exists(out.to_path_buf()));
        }
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let mut samples = Vec::with_capacity(sizes.total());
    for index in 0..sizes.total() {
        let s = generate_sample(spec, &sizes, seed, index, opts)?;
        let image_path = format!("images/{}.png", s.id);
        s.image.save_png(&out.join(&image_path))?;
        let mut objects = Vec::with_capacity(s.objects.len());
        for (k, o) in s.objects.iter().enumerate() {
            let mask_path = format!("masks/{}_{k}.png", s.id);
            o.mask.save_png(&out.join(&mask_path))?;
            objects.push(ObjectRecord {
                class: o.class.clone(),
                bbox: o.bbox,
                mask_path,
                color: o.color.clone(),
                size_px: o.size_px,
            });
        }
        samples.push(SampleRecord { id: s.id, image_path, caption: s.caption, variability: s.variability, split: s.split, objects });
    }
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        scene_spec: spec.clone(),
        rng_seed: seed,
        sizes,
        empty_fraction: opts.empty_fraction,
        variability: opts.variability,
        samples,
    };
    write_manifest(&manifest, out)?;
    let empties = manifest.samples.iter().filter(|s| s.objects.is_empty()).count();
    log::info!("wrote {} samples ({empties} empty scenes) to {}", manifest.samples.len(), out.display());
    Ok(manifest)
}

fn write_manifest(m: &CorpusManifest, out: &Path) -> Result<()> {
    let header = out.join("corpus.json");
    let text = serde_json::to_string_pretty(m).expect("manifest serialises");
    fs::write(&header, text).map_err(|e| Error::io(&header, e))?;
    let path = out.join("manifest.jsonl");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for s in &m.samples {
        let line = serde_json::to_string(s).expect("record serialises");
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// A corpus directory opened for reading.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: CorpusManifest,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Self> {
        let header = root.join("corpus.json");
        let text = fs::read_to_string(&header).map_err(|e| Error::io(&header, e))?;
        let mut manifest: CorpusManifest = serde_json::from_str(&text).map_err(|e| Error::parse(header.display().to_string(), e))?;
        let path = root.join("manifest.jsonl");
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord =
                serde_json::from_str(&line).map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 1), e))?;
            manifest.samples.push(rec);
        }
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    pub fn records(&self, split: Split) -> Vec<&SampleRecord> {
        self.manifest.split(split).collect()
    }

    pub fn record(&self, id: &str) -> Option<&SampleRecord> {
        self.manifest.samples.iter().find(|s| s.id == id)
    }

    pub fn load(&self, rec: &SampleRecord) -> Result<Sample> {
        let image = RgbImage::load_png(&self.root.join(&rec.image_path))?;
        let mut objects = Vec::with_capacity(rec.objects.len());
        for o in &rec.objects {
            let mask = Mask::load_png(&self.root.join(&o.mask_path))?;
            objects.push(SceneObject { class: o.class.clone(), color: o.color.clone(), size_px: o.size_px, mask, bbox: o.bbox });
        }
        Ok(Sample {
            id: rec.id.clone(),
            image,
            objects,
            caption: rec.caption.clone(),
            variability: rec.variability,
            split: rec.split,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.manifest.split(split).map(|r| self.load(r)).collect()
    }
}

/// Whether every object class of a record is mentioned by its caption.
pub fn caption_grounds(rec: &SampleRecord, table: &KeywordTable) -> bool {
    rec.objects.iter().all(|o| table.mentions(&rec.caption, &o.class))
}

/// Samples of `split` whose caption mentions every object's class.
pub fn filter_eval_set(corpus: &Corpus, split: Split, table: &KeywordTable) -> Result<Vec<Sample>> {
    let mut kept = Vec::new();
    let mut discarded = 0usize;
    for rec in corpus.manifest.split(split) {
        if caption_grounds(rec, table) {
            kept.push(corpus.load(rec)?);
        } else {
            discarded += 1;
        }
    }
    log::info!("{split} filter: kept {}, discarded {discarded}", kept.len());
    Ok(kept)
}
