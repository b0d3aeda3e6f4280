use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

const DEFAULT_TABLE: &str = include_str!("../data/keywords.toml");

/// Class name to the caption words that count as a mention of it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeywordTable {
    aliases: BTreeMap<String, Vec<String>>,
}

impl Default for KeywordTable {
    fn default() -> Self {
        Self::parse(DEFAULT_TABLE).expect("bundled keyword table is valid")
    }
}

/// Lowercases a caption word and strips leading/trailing punctuation.
pub fn normalize_word(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_ascii_alphanumeric()).to_ascii_lowercase()
}

impl KeywordTable {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<String>> = toml::from_str(text).map_err(|e| Error::parse("keyword table", e))?;
        let mut aliases = BTreeMap::new();
        for (class, mut words) in raw {
            for w in &words {
                if w.is_empty() || w.split_whitespace().count() != 1 || *w != w.to_lowercase() {
                    return Err(Error::parse("keyword table", format!("alias {w:?} of {class} is not a lowercase single word")));
                }
            }
            if !words.contains(&class) {
                words.insert(0, class.clone());
            }
            aliases.insert(class, words);
        }
        Ok(Self { aliases })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn from_map(map: BTreeMap<String, Vec<String>>) -> Self {
        let mut aliases = BTreeMap::new();
        for (class, mut words) in map {
            if !words.contains(&class) {
                words.insert(0, class.clone());
            }
            aliases.insert(class, words);
        }
        Self { aliases }
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.aliases.keys().map(String::as_str)
    }

    /// Aliases of `class`; a class missing from the table is matched by its
    /// own name only.
    pub fn aliases(&self, class: &str) -> Vec<String> {
        self.aliases.get(class).cloned().unwrap_or_else(|| vec![class.to_string()])
    }

    /// Whether a (raw) caption word mentions `class`.
    pub fn matches(&self, word: &str, class: &str) -> bool {
        let w = normalize_word(word);
        match self.aliases.get(class) {
            Some(list) => list.iter().any(|a| *a == w),
            None => w == class,
        }
    }

    /// Whether any word of `caption` mentions `class`.
    pub fn mentions(&self, caption: &str, class: &str) -> bool {
        caption.split_whitespace().any(|w| self.matches(w, class))
    }
}
