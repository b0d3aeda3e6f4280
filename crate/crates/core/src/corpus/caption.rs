//! Caption rendering at three variability regimes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keywords::KeywordTable;

/// Caption for scenes without objects.
pub const EMPTY_CAPTION: &str = "no finding";

/// Longest high-variability caption, in words.
const MAX_WORDS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variability {
    High,
    Middle,
    Low,
}

impl Variability {
    pub const ALL: [Variability; 3] = [Variability::High, Variability::Middle, Variability::Low];

    pub fn as_str(self) -> &'static str {
        match self {
            Variability::High => "high",
            Variability::Middle => "middle",
            Variability::Low => "low",
        }
    }
}

impl fmt::Display for Variability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variability {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(Variability::High),
            "middle" => Ok(Variability::Middle),
            "low" => Ok(Variability::Low),
            other => Err(Error::Argument(format!("unknown variability {other:?} (expected high, middle or low)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub fn of(size_px: usize) -> Self {
        match size_px {
            0..=14 => SizeClass::Small,
            15..=18 => SizeClass::Medium,
            _ => SizeClass::Large,
        }
    }

    fn word(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        }
    }

    fn synonyms(self) -> &'static [&'static str] {
        match self {
            SizeClass::Small => &["small", "tiny", "little"],
            SizeClass::Medium => &["medium", "mid-sized", "average"],
            SizeClass::Large => &["large", "big", "huge"],
        }
    }
}

/// Coarse 3x3 position of an object centre.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Position {
    /// 0 top, 1 middle, 2 bottom
    pub row: u8,
    /// 0 left, 1 centre, 2 right
    pub col: u8,
}

impl Position {
    pub fn of(cx: usize, cy: usize, image_size: usize) -> Self {
        let third = |v: usize| ((3 * v) / image_size).min(2) as u8;
        Self { row: third(cy), col: third(cx) }
    }

    /// Short form used by the template slot, e.g. "top left".
    fn short(self) -> &'static str {
        const NAMES: [[&str; 3]; 3] =
            [["top left", "top", "top right"], ["left", "center", "right"], ["bottom left", "bottom", "bottom right"]];
        NAMES[self.row as usize][self.col as usize]
    }

    fn phrase<G: Rng + ?Sized>(self, rng: &mut G) -> String {
        let v = [["top", "upper"], ["middle", "middle"], ["bottom", "lower"]][self.row as usize];
        let h = ["left", "center", "right"][self.col as usize];
        let vw = *v.choose(rng).unwrap();
        match (self.row, self.col) {
            (1, 1) => ["in the center", "in the middle", "at the center"].choose(rng).unwrap().to_string(),
            (1, _) => {
                let f = ["on the {h}", "to the {h}", "at the {h} side", "on the {h} side"];
                f.choose(rng).unwrap().replace("{h}", h)
            }
            (_, 1) => {
                let f = ["at the {v}", "near the {v}", "along the {v} edge", "toward the {v}"];
                f.choose(rng).unwrap().replace("{v}", vw)
            }
            _ => {
                let f = ["in the {v} {h}", "near the {v} {h}", "toward the {v} {h}", "at the {v} {h} corner"];
                f.choose(rng).unwrap().replace("{v}", vw).replace("{h}", h)
            }
        }
    }
}

/// What the caption renderer needs to know about one object.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectTraits {
    pub class: String,
    pub color: String,
    pub size: SizeClass,
    pub position: Position,
}

fn color_synonyms(color: &str) -> Vec<&str> {
    match color {
        "red" => vec!["red", "crimson", "scarlet"],
        "green" => vec!["green", "emerald", "lime"],
        "blue" => vec!["blue", "navy", "azure"],
        "yellow" => vec!["yellow", "golden", "lemon"],
        "purple" => vec!["purple", "violet", "magenta"],
        "cyan" => vec!["cyan", "teal", "turquoise"],
        other => vec![other],
    }
}

/// Per-class middle-regime templates with `{color}`, `{size}`, `{pos}` slots.
#[derive(Clone, Debug)]
pub struct Templates {
    by_class: BTreeMap<String, Vec<String>>,
}

impl Default for Templates {
    fn default() -> Self {
        let mut by_class = BTreeMap::new();
        for (class, text) in [
            ("circle", include_str!("../../data/templates/circle.txt")),
            ("square", include_str!("../../data/templates/square.txt")),
            ("triangle", include_str!("../../data/templates/triangle.txt")),
            ("cross", include_str!("../../data/templates/cross.txt")),
            ("ring", include_str!("../../data/templates/ring.txt")),
            ("bar", include_str!("../../data/templates/bar.txt")),
            ("blob", include_str!("../../data/templates/blob.txt")),
            ("wedge", include_str!("../../data/templates/wedge.txt")),
        ] {
            by_class.insert(class.to_string(), parse_lines(text));
        }
        Self { by_class }
    }
}

fn parse_lines(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
}

impl Templates {
    /// Loads `<class>.txt` files from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut by_class = BTreeMap::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|e| e == "txt") {
                let class = path.file_stem().unwrap().to_string_lossy().into_owned();
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                by_class.insert(class, parse_lines(&text));
            }
        }
        Ok(Self { by_class })
    }

    pub fn for_class(&self, class: &str) -> &[String] {
        self.by_class.get(class).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Renders a caption for a non-empty scene.
pub fn render_caption<G: Rng + ?Sized>(
    objects: &[ObjectTraits],
    variability: Variability,
    templates: &Templates,
    keywords: &KeywordTable,
    rng: &mut G,
) -> Result<String> {
    if objects.is_empty() {
        return Err(Error::Argument("cannot caption a scene without objects".into()));
    }
    match variability {
        Variability::Low => Ok(objects.iter().map(|o| o.class.as_str()).collect::<Vec<_>>().join(", ")),
        Variability::Middle => {
            let mut parts = Vec::with_capacity(objects.len());
            for o in objects {
                let list = templates.for_class(&o.class);
                let t = list.choose(rng).map(String::as_str).unwrap_or("a {color} {class}");
                parts.push(
                    t.replace("{color}", &o.color)
                        .replace("{size}", o.size.word())
                        .replace("{pos}", o.position.short())
                        .replace("{class}", &o.class),
                );
            }
            Ok(parts.join(" and "))
        }
        Variability::High => Ok(render_high(objects, keywords, rng)),
    }
}

fn render_high<G: Rng + ?Sized>(objects: &[ObjectTraits], keywords: &KeywordTable, rng: &mut G) -> String {
    const OPENERS: [&str; 10] =
        ["", "there is", "there's", "we see", "the image shows", "a picture of", "this scene has", "i can see", "showing", "look at"];
    const ARTICLES: [&str; 3] = ["a", "one", "the"];
    const JOINERS: [&str; 6] = ["and", "next to", "along with", "as well as", "beside", "with"];
    const ENDINGS: [&str; 4] = ["", "here", "in the picture", "on a gray background"];

    let mut p_attr = 0.55;
    loop {
        let mut words: Vec<String> = Vec::new();
        let push = |s: &str, words: &mut Vec<String>| words.extend(s.split_whitespace().map(String::from));
        push(OPENERS.choose(rng).unwrap(), &mut words);
        for (i, o) in objects.iter().enumerate() {
            if i > 0 {
                push(JOINERS.choose(rng).unwrap(), &mut words);
            }
            push(ARTICLES.choose(rng).unwrap(), &mut words);
            if rng.random_bool(p_attr) {
                push(o.size.synonyms().choose(rng).unwrap(), &mut words);
            }
            if rng.random_bool(p_attr) {
                push(color_synonyms(&o.color).choose(rng).unwrap(), &mut words);
            }
            push(&noun(&o.class, keywords, rng), &mut words);
            if rng.random_bool(p_attr) {
                push(&o.position.phrase(rng), &mut words);
            }
        }
        push(ENDINGS.choose(rng).unwrap(), &mut words);
        if words.len() <= MAX_WORDS {
            return words.join(" ");
        }
        p_attr *= 0.5;
    }
}

/// Class name most of the time, otherwise a singular alias.
fn noun<G: Rng + ?Sized>(class: &str, keywords: &KeywordTable, rng: &mut G) -> String {
    let plural_s = format!("{class}s");
    let plural_es = format!("{class}es");
    let alts: Vec<String> =
        keywords.aliases(class).into_iter().filter(|a| a != class && *a != plural_s && *a != plural_es).collect();
    if alts.is_empty() || rng.random_bool(0.6) {
        class.to_string()
    } else {
        alts.choose(rng).unwrap().clone()
    }
}
