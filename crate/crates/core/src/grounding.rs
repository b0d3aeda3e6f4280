//! Phrase grounding: token selection, class heatmaps and evaluation cases.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::atlas::AttentionAtlas;
use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::imaging::Mask;
use crate::keywords::KeywordTable;
use crate::text::{TokenSeq, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSource {
    Keyword,
    FallbackAllWords,
}

impl TokenSource {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenSource::Keyword => "keyword",
            TokenSource::FallbackAllWords => "fallback_all_words",
        }
    }
}

/// One (sample, class) evaluation unit at atlas resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingCase {
    pub sample_id: String,
    pub class: String,
    /// `z * z`, row-major.
    pub heatmap: Vec<f32>,
    pub mask: Mask,
    pub token_source: TokenSource,
}

/// Token indices grounding `class` in `seq`: the spans of every caption word
/// matching an alias, or every non-special token when none matches.
pub fn select_tokens(seq: &TokenSeq, class: &str, table: &KeywordTable) -> (Vec<usize>, TokenSource) {
    let mut picked: Vec<usize> = seq
        .words
        .iter()
        .zip(&seq.word_spans)
        .filter(|(w, _)| table.matches(w, class))
        .flat_map(|(_, span)| span.clone())
        .collect();
    if !picked.is_empty() {
        picked.sort_unstable();
        picked.dedup();
        return (picked, TokenSource::Keyword);
    }
    let all = (0..seq.n_real).filter(|&i| !Vocabulary::is_special(seq.ids[i])).collect();
    (all, TokenSource::FallbackAllWords)
}

/// Unweighted mean of the selected token maps.
pub fn class_heatmap(atlas: &AttentionAtlas, tokens: &[usize]) -> Result<Vec<f32>> {
    if tokens.is_empty() {
        return Err(Error::Argument("cannot build a heatmap from an empty token set".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= atlas.t_max) {
        return Err(Error::Argument(format!("token index {bad} outside atlas of {} tokens", atlas.t_max)));
    }
    let n = atlas.z * atlas.z;
    let mut acc = vec![0.0f64; n];
    for &t in tokens {
        for (a, &v) in acc.iter_mut().zip(atlas.token_map(t)) {
            *a += v as f64;
        }
    }
    let k = tokens.len() as f64;
    Ok(acc.into_iter().map(|v| (v / k) as f32).collect())
}

/// Pixelwise OR of the masks of every object of `class`.
pub fn union_masks(sample: &Sample, class: &str) -> Option<Mask> {
    sample.objects.iter().filter(|o| o.class == class).map(|o| o.mask.clone()).reduce(|a, b| a.union(&b))
}

/// One case per distinct class in the sample; ground truth is pooled onto
/// the atlas grid by any-positive pooling.
pub fn split_cases(sample: &Sample, seq: &TokenSeq, atlas: &AttentionAtlas, table: &KeywordTable) -> Result<Vec<GroundingCase>> {
    let mut cases = Vec::new();
    for class in sample.classes() {
        let mask = union_masks(sample, &class).expect("class comes from the sample").downsample_any(atlas.z)?;
        if mask.is_empty() {
            log::warn!("{}: {class} mask vanishes at {}x{}, case dropped", sample.id, atlas.z, atlas.z);
            continue;
        }
        let (tokens, token_source) = select_tokens(seq, &class, table);
        cases.push(GroundingCase {
            sample_id: sample.id.clone(),
            class,
            heatmap: class_heatmap(atlas, &tokens)?,
            mask,
            token_source,
        });
    }
    Ok(cases)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CaseLine {
    sample_id: String,
    class: String,
    token_source: TokenSource,
    z: usize,
    heatmap_path: String,
    mask_path: String,
}

/// Writes `cases.jsonl` plus one raw f32 heatmap and one PNG mask per case
/// under `dir`.
pub fn export_cases(cases: &[GroundingCase], dir: &Path) -> Result<()> {
    let sub = dir.join("cases");
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let index = dir.join("cases.jsonl");
    let file = fs::File::create(&index).map_err(|e| Error::io(&index, e))?;
    let mut w = BufWriter::new(file);
    for c in cases {
        let stem = format!("{}_{}", c.sample_id, c.class);
        let heat = format!("cases/{stem}.f32");
        let mask = format!("cases/{stem}.png");
        let bytes: Vec<u8> = c.heatmap.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(&heat), bytes).map_err(|e| Error::io(dir.join(&heat), e))?;
        c.mask.save_png(&dir.join(&mask))?;
        let line = CaseLine {
            sample_id: c.sample_id.clone(),
            class: c.class.clone(),
            token_source: c.token_source,
            z: c.mask.width,
            heatmap_path: heat,
            mask_path: mask,
        };
        writeln!(w, "{}", serde_json::to_string(&line).expect("case serialises")).map_err(|e| Error::io(&index, e))?;
    }
    w.flush().map_err(|e| Error::io(&index, e))
}

/// Reads a `cases.jsonl` written by [`export_cases`]; paths are relative to
/// the index file.
pub fn load_cases(index: &Path) -> Result<Vec<GroundingCase>> {
    let dir = index.parent().unwrap_or(Path::new("."));
    let file = fs::File::open(index).map_err(|e| Error::io(index, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(index, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaseLine = serde_json::from_str(&line).map_err(|e| Error::parse(format!("{}:{}", index.display(), i + 1), e))?;
        let hp = dir.join(&rec.heatmap_path);
        let bytes = fs::read(&hp).map_err(|e| Error::io(&hp, e))?;
        if bytes.len() != 4 * rec.z * rec.z {
            return Err(Error::parse(hp.display().to_string(), format!("expected {} values", rec.z * rec.z)));
        }
        let heatmap = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let mask = Mask::load_png(&dir.join(&rec.mask_path))?;
        out.push(GroundingCase { sample_id: rec.sample_id, class: rec.class, heatmap, mask, token_source: rec.token_source });
    }
    Ok(out)
}
