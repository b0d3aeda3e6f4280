//! Heatmap-vs-mask localization scores.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::{GroundingCase, TokenSource};

/// Denominator regulariser so constant heatmaps score 0 rather than NaN.
pub const CNR_EPS: f64 = 1e-12;

fn check<T>(h: &[T], labels: &[bool]) -> Result<(usize, usize)> {
    if h.len() != labels.len() {
        return Err(Error::Shape(format!("heatmap has {} values, mask {}", h.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Domain("mask must contain both positive and negative pixels".into()));
    }
    Ok((pos, labels.len() - pos))
}

/// Signed contrast-to-noise ratio with population variances.
pub fn cnr<T: Copy + Into<f64>>(h: &[T], labels: &[bool]) -> Result<f64> {
    let (np, nn) = check(h, labels)?;
    let (mut sp, mut sn) = (0.0, 0.0);
    for (&v, &l) in h.iter().zip(labels) {
        if l {
            sp += v.into();
        } else {
            sn += v.into();
        }
    }
    let (mp, mn) = (sp / np as f64, sn / nn as f64);
    let (mut vp, mut vn) = (0.0, 0.0);
    for (&v, &l) in h.iter().zip(labels) {
        let v: f64 = v.into();
        if l {
            vp += (v - mp) * (v - mp);
        } else {
            vn += (v - mn) * (v - mn);
        }
    }
    let (vp, vn) = (vp / np as f64, vn / nn as f64);
    Ok((mp - mn) / (vp + vn + CNR_EPS).sqrt())
}

/// Unsigned variant, `|cnr|`.
pub fn cnr_abs<T: Copy + Into<f64>>(h: &[T], labels: &[bool]) -> Result<f64> {
    Ok(cnr(h, labels)?.abs())
}

/// Area under the ROC curve, Mann-Whitney form with half credit for ties.
pub fn auc_roc<T: Copy + Into<f64>>(h: &[T], labels: &[bool]) -> Result<f64> {
    let (np, nn) = check(h, labels)?;
    let mut pairs: Vec<(f64, bool)> = h.iter().map(|&v| v.into()).zip(labels.iter().copied()).collect();
    if pairs.iter().any(|(v, _)| v.is_nan()) {
        return Err(Error::Domain("heatmap contains NaN".into()));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut neg_below, mut credit) = (0u64, 0.0f64);
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            if pairs[j].1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        credit += (p * neg_below) as f64 + 0.5 * (p * n) as f64;
        neg_below += n;
        i = j;
    }
    Ok(credit / (np as f64 * nn as f64))
}

/// 1 when the first (row-major) maximum lies inside the mask.
pub fn top1<T: Copy + Into<f64>>(h: &[T], labels: &[bool]) -> Result<u8> {
    if h.len() != labels.len() || h.is_empty() {
        return Err(Error::Shape(format!("heatmap has {} values, mask {}", h.len(), labels.len())));
    }
    let mut best = 0;
    for i in 1..h.len() {
        if h[i].into() > h[best].into() {
            best = i;
        }
    }
    Ok(labels[best] as u8)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub sample_id: String,
    pub class: String,
    pub token_source: TokenSource,
    pub cnr: f64,
    pub cnr_abs: f64,
    pub auc: f64,
    pub top1: u8,
}

pub fn score_case(case: &GroundingCase) -> Result<CaseScores> {
    let labels = &case.mask.bits;
    let c = cnr(&case.heatmap, labels)?;
    Ok(CaseScores {
        sample_id: case.sample_id.clone(),
        class: case.class.clone(),
        token_source: case.token_source,
        cnr: c,
        cnr_abs: c.abs(),
        auc: auc_roc(&case.heatmap, labels)?,
        top1: top1(&case.heatmap, labels)?,
    })
}

/// Cases whose mask covers the whole grid are skipped with a warning.
pub fn score_cases(cases: &[GroundingCase]) -> Result<Vec<CaseScores>> {
    let mut out = Vec::with_capacity(cases.len());
    for c in cases {
        match score_case(c) {
            Ok(s) => out.push(s),
            Err(Error::Domain(msg)) => log::warn!("{} {}: {msg}; skipped", c.sample_id, c.class),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub n: usize,
    pub cnr: f64,
    pub cnr_abs: f64,
    pub auc: f64,
    pub top1: f64,
}

impl ScoreSummary {
    pub fn of<'a>(scores: impl IntoIterator<Item = &'a CaseScores>) -> Self {
        let mut s = ScoreSummary::default();
        for c in scores {
            s.n += 1;
            s.cnr += c.cnr;
            s.cnr_abs += c.cnr_abs;
            s.auc += c.auc;
            s.top1 += c.top1 as f64;
        }
        if s.n > 0 {
            let n = s.n as f64;
            s.cnr /= n;
            s.cnr_abs /= n;
            s.auc /= n;
            s.top1 /= n;
        } else {
            s.cnr = f64::NAN;
            s.cnr_abs = f64::NAN;
            s.auc = f64::NAN;
            s.top1 = f64::NAN;
        }
        s
    }

    pub fn per_class(scores: &[CaseScores]) -> BTreeMap<String, ScoreSummary> {
        let mut groups: BTreeMap<String, Vec<&CaseScores>> = BTreeMap::new();
        for s in scores {
            groups.entry(s.class.clone()).or_default().push(s);
        }
        groups.into_iter().map(|(k, v)| (k, ScoreSummary::of(v))).collect()
    }
}

/// Per-case rows followed by one `ALL` footer row with the means.
pub fn write_scores_csv(scores: &[CaseScores], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "sample_id,class,token_source,cnr,cnr_abs,auc,top1").map_err(io)?;
    for s in scores {
        writeln!(w, "{},{},{},{},{},{},{}", s.sample_id, s.class, s.token_source.as_str(), s.cnr, s.cnr_abs, s.auc, s.top1)
            .map_err(io)?;
    }
    let all = ScoreSummary::of(scores);
    writeln!(w, "ALL,,,{},{},{},{}", all.cnr, all.cnr_abs, all.auc, all.top1).map_err(io)?;
    w.flush().map_err(io)
}
