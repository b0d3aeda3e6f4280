//! Word-piece vocabulary with greedy longest-match segmentation.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::keywords::normalize_word;

pub const SOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
const SPECIALS: [&str; 3] = ["<sos>", "<eos>", "<pad>"];
const CONT: &str = "##";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub min_freq: usize,
    /// Words kept out of the whole-word set so they split into pieces.
    pub force_oov: Vec<String>,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self { min_freq: 10, force_oov: vec!["wedge".into()] }
    }
}

/// Lowercases, maps characters outside printable ASCII to `?`, collapses
/// whitespace and trims.
pub fn normalize(caption: &str) -> String {
    let mapped: String = caption
        .chars()
        .map(|c| {
            if c.is_whitespace() {
                ' '
            } else if c.is_ascii_graphic() {
                c.to_ascii_lowercase()
            } else {
                '?'
            }
        })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn fallback_chars() -> impl Iterator<Item = char> {
    (33u8..=126).map(char::from)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    /// Word-initial pieces.
    initial: HashMap<String, u32>,
    /// Continuation pieces, keyed without the `##` marker.
    continuation: HashMap<String, u32>,
    max_initial_len: usize,
}

/// A tokenized caption padded to `T_max`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    /// Token index range of each caption word.
    pub word_spans: Vec<Range<usize>>,
    /// Caption words after normalization.
    pub words: Vec<String>,
    /// SOS + pieces + EOS.
    pub n_real: usize,
}

impl TokenSeq {
    pub fn t_max(&self) -> usize {
        self.ids.len()
    }

    pub fn eos_index(&self) -> usize {
        self.n_real - 1
    }
}

impl Vocabulary {
    fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        if pieces.len() < 3 || pieces[..3] != SPECIALS {
            return Err(Error::parse("vocabulary", "first three pieces must be <sos>, <eos>, <pad>"));
        }
        let mut initial = HashMap::new();
        let mut continuation = HashMap::new();
        for (i, p) in pieces.iter().enumerate().skip(3) {
            let prev = if let Some(rest) = p.strip_prefix(CONT).filter(|r| !r.is_empty()) {
                continuation.insert(rest.to_string(), i as u32)
            } else {
                initial.insert(p.clone(), i as u32)
            };
            if prev.is_some() {
                return Err(Error::parse("vocabulary", format!("duplicate piece {p:?}")));
            }
        }
        for c in fallback_chars() {
            let s = c.to_string();
            if !initial.contains_key(&s) || !continuation.contains_key(&s) {
                return Err(Error::parse("vocabulary", format!("missing fallback piece for {c:?}")));
            }
        }
        let max_initial_len = initial.keys().map(String::len).max().unwrap_or(1);
        Ok(Self { pieces, initial, continuation, max_initial_len })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn piece(&self, id: u32) -> &str {
        &self.pieces[id as usize]
    }

    pub fn is_special(id: u32) -> bool {
        id <= PAD
    }

    /// Number of whole-word pieces.
    pub fn word_count(&self) -> usize {
        self.pieces.len() - 3 - 2 * fallback_chars().count()
    }

    pub fn contains_word(&self, w: &str) -> bool {
        w.len() > 1 && self.initial.contains_key(w)
    }

    /// SHA-256 of the piece list, first 8 bytes little-endian.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        for p in &self.pieces {
            h.update(p.as_bytes());
            h.update(b"\n");
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.pieces.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_lines(&text)
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        Self::from_pieces(text.lines().map(String::from).collect())
    }

    fn segment_word(&self, word: &str, out: &mut Vec<u32>) {
        // all pieces are ASCII after normalization, so byte slicing is safe
        let mut start = 0;
        let mut first = true;
        while start < word.len() {
            let rest = &word[start..];
            let limit = if first { rest.len().min(self.max_initial_len) } else { rest.len() };
            let table = if first { &self.initial } else { &self.continuation };
            let (len, id) = (1..=limit)
                .rev()
                .find_map(|l| table.get(&rest[..l]).map(|&id| (l, id)))
                .expect("fallback pieces cover every printable character");
            out.push(id);
            start += len;
            first = false;
        }
    }

    /// Tokenizes a caption, rejecting it when it needs more than
    /// `t_max - 2` pieces.
    pub fn tokenize(&self, caption: &str, t_max: usize) -> Result<TokenSeq> {
        let norm = normalize(caption);
        if norm.is_empty() {
            return Err(Error::Argument("caption is empty after normalization".into()));
        }
        let mut ids = vec![SOS];
        let mut word_spans = Vec::new();
        let mut words = Vec::new();
        for w in norm.split(' ') {
            let start = ids.len();
            self.segment_word(w, &mut ids);
            word_spans.push(start..ids.len());
            words.push(w.to_string());
        }
        let pieces = ids.len() - 1;
        if pieces + 2 > t_max {
            return Err(Error::CaptionTooLong { tokens: pieces, limit: t_max.saturating_sub(2) });
        }
        ids.push(EOS);
        let n_real = ids.len();
        ids.resize(t_max, PAD);
        Ok(TokenSeq { ids, word_spans, words, n_real })
    }

    /// Inverse of [`Vocabulary::tokenize`] up to normalization.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids.iter().filter(|&&id| !Self::is_special(id)) {
            let p = self.piece(id);
            match p.strip_prefix(CONT).filter(|r| !r.is_empty()) {
                Some(rest) => out.push_str(rest),
                None => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(p);
                }
            }
        }
        out
    }
}

/// Builds a vocabulary from training captions: words seen at least
/// `min_freq` times become whole pieces, every printable character is a
/// fallback piece in both word-initial and `##` continuation form.
pub fn build_vocab<S: AsRef<str>>(captions: &[S], config: &VocabConfig) -> Result<Vocabulary> {
    if captions.is_empty() {
        return Err(Error::Argument("cannot build a vocabulary from zero captions".into()));
    }
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for c in captions {
        for w in normalize(c.as_ref()).split(' ').filter(|w| !w.is_empty()) {
            *freq.entry(w.to_string()).or_default() += 1;
        }
    }
    let forced: Vec<String> = config.force_oov.iter().map(|w| normalize_word(w)).collect();
    let mut words: Vec<(String, usize)> = freq
        .into_iter()
        .filter(|(w, n)| {
            *n >= config.min_freq.max(1)
                && w.len() > 1
                && !w.starts_with(CONT)
                && !SPECIALS.contains(&w.as_str())
                && !forced.contains(&normalize_word(w))
        })
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    pieces.extend(words.into_iter().map(|(w, _)| w));
    for c in fallback_chars() {
        pieces.push(c.to_string());
        pieces.push(format!("{CONT}{c}"));
    }
    Vocabulary::from_pieces(pieces)
}
