//! Per-class ranking of caption words by the CNR of their attention maps.

use std::collections::BTreeMap;

use groundiff::atlas::{default_noise_levels, extract_atlas_with, AttentionAtlas, DEFAULT_LEVELS};
use groundiff::corpus::Sample;
use groundiff::diffusion::model::Model;
use groundiff::grounding::{class_heatmap, union_masks};
use groundiff::keywords::normalize_word;
use groundiff::metrics::cnr;
use groundiff::text::TokenSeq;
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const SOS_ROW: &str = "<sos>";
pub const EOS_ROW: &str = "<eos>";

/// A sample together with its tokenization and atlas.
#[derive(Clone, Debug)]
pub struct AtlasedSample<'a> {
    pub sample: &'a Sample,
    pub seq: TokenSeq,
    pub atlas: AttentionAtlas,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordRow {
    pub word: String,
    pub mean_cnr: f64,
    pub occurrences: usize,
}

/// Top rows per class, best first.
pub type WordRanking = BTreeMap<String, Vec<WordRow>>;

/// Atlases of every non-empty sample whose caption tokenizes.
pub fn atlas_samples<'a>(model: &Model, samples: &'a [Sample], levels: Option<&[usize]>) -> Result<Vec<AtlasedSample<'a>>> {
    let default = default_noise_levels(model.schedule().steps, DEFAULT_LEVELS);
    let levels = levels.filter(|l| !l.is_empty()).unwrap_or(&default);
    let mut out = Vec::new();
    for s in samples.iter().filter(|s| !s.is_empty_scene()) {
        let Ok(seq) = model.tokenize(&s.caption) else {
            log::warn!("{}: caption too long, skipped", s.id);
            continue;
        };
        let cond = model.conditioning(&[&seq])?;
        let atlas = extract_atlas_with(model, &s.image, &s.id, &seq, &cond, &s.caption, levels)?;
        out.push(AtlasedSample { sample: s, seq, atlas });
    }
    Ok(out)
}

/// For every class, mean CNR of each word (all occurrences of a word in a
/// caption are pooled) and of the SOS/EOS tokens against the class mask.
/// Rows seen fewer than `min_occurrences` times are dropped; the best `top`
/// remain.
pub fn rank_words(items: &[AtlasedSample], min_occurrences: usize, top: usize) -> Result<WordRanking> {
    let mut acc: BTreeMap<String, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    for it in items {
        let mut words: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (w, span) in it.seq.words.iter().zip(&it.seq.word_spans) {
            let key = normalize_word(w);
            if !key.is_empty() {
                words.entry(key).or_default().extend(span.clone());
            }
        }
        words.insert(SOS_ROW.into(), vec![0]);
        words.insert(EOS_ROW.into(), vec![it.seq.eos_index()]);
        for class in it.sample.classes() {
            let mask = union_masks(it.sample, &class).expect("class from sample").downsample_any(it.atlas.z)?;
            if mask.is_empty() || mask.area() == mask.bits.len() {
                continue;
            }
            let per_class = acc.entry(class).or_default();
            for (w, toks) in &words {
                let h = class_heatmap(&it.atlas, toks)?;
                let e = per_class.entry(w.clone()).or_default();
                e.0 += cnr(&h, &mask.bits)?;
                e.1 += 1;
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|(class, rows)| {
            let mut rows: Vec<WordRow> = rows
                .into_iter()
                .filter(|(_, (_, n))| *n >= min_occurrences)
                .map(|(word, (s, n))| WordRow { word, mean_cnr: s / n as f64, occurrences: n })
                .collect();
            rows.sort_by(|a, b| b.mean_cnr.total_cmp(&a.mean_cnr).then_with(|| a.word.cmp(&b.word)));
            rows.truncate(top);
            (class, rows)
        })
        .collect())
}

/// Fraction of classes (with at least one qualifying row) whose top rows
/// include `word`.
pub fn fraction_with_word(ranking: &WordRanking, word: &str) -> f64 {
    let ranked: Vec<&Vec<WordRow>> = ranking.values().filter(|r| !r.is_empty()).collect();
    if ranked.is_empty() {
        return 0.0;
    }
    ranked.iter().filter(|r| r.iter().any(|w| w.word == word)).count() as f64 / ranked.len() as f64
}
