//! Synthetic cipher language pair, bundle generation, corpus file I/O and
//! character-range language detection.
//!
//! The target language is a word-level cipher of the source language: each
//! source word maps to a distinct target word whose letters live in a
//! contiguous non-Latin Unicode block, and the word order is optionally
//! reversed. Because the mapping is known, every generated parallel pair can
//! be checked against [`oracle_translate`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("lexicon is not a bijection: `{0}` and `{1}` map to the same target word `{2}`")]
    NonBijective(String, String, String),
    #[error("target word `{0}` has no character in the target block")]
    TargetOutsideBlock(String),
    #[error("source word `{0}` contains a character in the target block")]
    SourceInsideBlock(String),
    #[error("word `{0}` is not in the lexicon")]
    OutOfLexicon(String),
    #[error("empty line")]
    EmptyLine,
    #[error("split size `{0}` must be at least 1")]
    BadSize(&'static str),
    #[error("could not draw {wanted} unique lines for `{split}` (got {got})")]
    Exhausted {
        split: &'static str,
        wanted: usize,
        got: usize,
    },
    #[error("{path}:{line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Which side of the language pair a line or sequence belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LanguageId {
    #[serde(rename = "src")]
    Src,
    #[serde(rename = "tgt")]
    Tgt,
}

impl LanguageId {
    pub fn other(self) -> Self {
        match self {
            LanguageId::Src => LanguageId::Tgt,
            LanguageId::Tgt => LanguageId::Src,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LanguageId::Src => "src",
            LanguageId::Tgt => "tgt",
        }
    }
}

impl fmt::Display for LanguageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LanguageId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "src" => Ok(LanguageId::Src),
            "tgt" => Ok(LanguageId::Tgt),
            other => Err(format!("unknown language `{other}` (expected src or tgt)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReorderRule {
    Identity,
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    SrcToTgt,
    TgtToSrc,
}

/// Cyrillic small letters: `'a' + 0x3CF = 'а'` (U+0430) through `'z' + 0x3CF` (U+0449).
pub const DEFAULT_TARGET_OFFSET: u32 = 0x3CF;

/// The ground-truth relationship between the two synthetic languages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CipherSpec {
    /// Source word to target word. Kept ordered so serialization is stable.
    pub lexicon_map: BTreeMap<String, String>,
    pub reorder_rule: ReorderRule,
    pub target_char_offset: u32,
}

impl CipherSpec {
    /// Builds a spec from explicit pairs and validates it.
    pub fn new<I, S, T>(pairs: I, reorder_rule: ReorderRule, target_char_offset: u32) -> Result<Self>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        let spec = CipherSpec {
            lexicon_map: pairs
                .into_iter()
                .map(|(s, t)| (s.into(), t.into()))
                .collect(),
            reorder_rule,
            target_char_offset,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Inclusive codepoint range of the target script.
    pub fn target_block(&self) -> (u32, u32) {
        ('a' as u32 + self.target_char_offset, 'z' as u32 + self.target_char_offset)
    }

    pub fn in_target_block(&self, c: char) -> bool {
        let (lo, hi) = self.target_block();
        (lo..=hi).contains(&(c as u32))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen: HashMap<&str, &str> = HashMap::new();
        for (s, t) in &self.lexicon_map {
            if let Some(prev) = seen.insert(t.as_str(), s.as_str()) {
                return Err(CorpusError::NonBijective(
                    prev.to_string(),
                    s.clone(),
                    t.clone(),
                ));
            }
            if !t.chars().any(|c| self.in_target_block(c)) {
                return Err(CorpusError::TargetOutsideBlock(t.clone()));
            }
            if s.chars().any(|c| self.in_target_block(c)) {
                return Err(CorpusError::SourceInsideBlock(s.clone()));
            }
        }
        Ok(())
    }

    /// Maps an ASCII lowercase string into the target script.
    pub fn shift(&self, word: &str) -> String {
        word.chars()
            .map(|c| {
                if c.is_ascii_lowercase() {
                    char::from_u32(c as u32 + self.target_char_offset).unwrap_or(c)
                } else {
                    c
                }
            })
            .collect()
    }

    /// A lexicon over `words`, each target form a random letter string in the
    /// target block. Collisions are redrawn, so the result is a bijection.
    pub fn random_for(
        words: &[&str],
        reorder_rule: ReorderRule,
        target_char_offset: u32,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1fe);
        let mut used = HashSet::new();
        let mut map = BTreeMap::new();
        let probe = CipherSpec {
            lexicon_map: BTreeMap::new(),
            reorder_rule,
            target_char_offset,
        };
        let mut sorted: Vec<&str> = words.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for w in sorted {
            let target = loop {
                let len = rng.gen_range(3..=7);
                let raw: String = (0..len)
                    .map(|_| (b'a' + rng.gen_range(0..26u8)) as char)
                    .collect();
                let t = probe.shift(&raw);
                if used.insert(t.clone()) {
                    break t;
                }
            };
            map.insert(w.to_string(), target);
        }
        CipherSpec::new(map, reorder_rule, target_char_offset)
    }

    fn inverse(&self) -> HashMap<&str, &str> {
        self.lexicon_map
            .iter()
            .map(|(s, t)| (t.as_str(), s.as_str()))
            .collect()
    }
}

/// Ground-truth translation: word-wise substitution, then the reorder rule.
pub fn oracle_translate(line: &str, spec: &CipherSpec, direction: Direction) -> Result<String> {
    let inverse;
    let mut words: Vec<&str> = Vec::new();
    match direction {
        Direction::SrcToTgt => {
            for w in line.split_whitespace() {
                let t = spec
                    .lexicon_map
                    .get(w)
                    .ok_or_else(|| CorpusError::OutOfLexicon(w.to_string()))?;
                words.push(t.as_str());
            }
        }
        Direction::TgtToSrc => {
            inverse = spec.inverse();
            for w in line.split_whitespace() {
                let s = inverse
                    .get(w)
                    .ok_or_else(|| CorpusError::OutOfLexicon(w.to_string()))?;
                words.push(s);
            }
        }
    }
    // reverse is its own inverse
    if spec.reorder_rule == ReorderRule::Reverse {
        words.reverse();
    }
    Ok(words.join(" "))
}

/// `Tgt` iff any character falls in the target block, otherwise `Src`.
pub fn detect_language(line: &str, spec: &CipherSpec) -> Result<LanguageId> {
    if line.trim().is_empty() {
        return Err(CorpusError::EmptyLine);
    }
    if line.chars().any(|c| spec.in_target_block(c)) {
        Ok(LanguageId::Tgt)
    } else {
        Ok(LanguageId::Src)
    }
}

pub fn nfc(line: &str) -> String {
    line.nfc().collect()
}

// ---------------------------------------------------------------------------
// Generation grammar

const BRANDS: &[&str] = &[
    "nike", "adidas", "puma", "reebok", "samsung", "apple", "boat", "lenovo", "redmi", "realme",
    "titan", "fastrack", "levis", "raymond", "bata", "prestige", "philips", "lakme", "himalaya",
    "wildcraft", "skybags", "oneplus", "vivo", "sony", "campus",
];
/// Brands from this index on never occur out of domain: no parallel data
/// teaches their translation.
const OOD_BRANDS: usize = 15;
const COLORS: &[&str] = &[
    "red", "blue", "black", "white", "green", "yellow", "pink", "grey", "brown", "orange",
    "purple", "maroon",
];
const MATERIALS: &[&str] = &[
    "cotton", "leather", "silk", "denim", "wooden", "steel", "plastic", "woolen", "rubber",
    "glass",
];
const CATEGORIES: &[&str] = &[
    "shirt", "jeans", "saree", "kurta", "shoes", "sandals", "watch", "phone", "charger",
    "earphones", "laptop", "bag", "backpack", "wallet", "belt", "cap", "jacket", "tshirt",
    "trousers", "shorts", "socks", "bedsheet", "pillow", "curtain", "bottle", "mixer", "kettle",
    "lamp", "mattress", "sofa", "table", "chair", "helmet", "bracelet", "necklace", "ring",
    "perfume", "shampoo", "soap", "toys",
];
const AUDIENCES: &[&str] = &["men", "women", "kids", "boys", "girls"];
const MODIFIERS: &[&str] = &[
    "combo", "pack", "set", "latest", "new", "cheap", "branded", "original", "premium",
    "stylish", "wireless", "waterproof", "small", "large",
];

const NOUNS: &[&str] = &[
    "man", "woman", "child", "city", "house", "river", "market", "school", "government",
    "minister", "village", "road", "train", "teacher", "doctor", "farmer", "country", "company",
    "festival", "morning", "evening", "family", "friend", "police", "hospital", "book",
    "letter", "water", "food", "garden",
];
const SUBJECTS: &[&str] = &[
    "man", "woman", "child", "teacher", "doctor", "farmer", "minister", "friend", "family",
    "police", "company", "government",
];
const PLACES: &[&str] = &[
    "city", "house", "river", "market", "school", "village", "road", "train", "country",
    "hospital", "garden", "festival",
];
const VERBS: &[&str] = &[
    "bought", "sold", "saw", "found", "gave", "wore", "carried", "lost", "made", "brought",
    "wanted", "liked", "cleaned", "opened", "washed", "used", "kept", "took", "showed",
    "needed",
];
const ADJECTIVES: &[&str] = &[
    "old", "young", "big", "beautiful", "happy", "busy", "poor", "rich", "famous", "quiet",
];
const DETERMINERS: &[&str] = &["the", "a", "his", "her", "their", "this"];
const PREPOSITIONS: &[&str] = &["in", "on", "at", "near", "from", "to"];
const TIMES: &[&str] = &["yesterday", "today", "tonight", "again"];
const FUNCTION_EXTRA: &[&str] = &["and", "with", "was", "is", "very", "of", "for"];

/// Every source word the grammar can emit.
pub fn source_lexicon() -> Vec<&'static str> {
    let mut all: Vec<&str> = [
        BRANDS, COLORS, MATERIALS, CATEGORIES, AUDIENCES, MODIFIERS, NOUNS, SUBJECTS, PLACES,
        VERBS, ADJECTIVES, DETERMINERS, PREPOSITIONS, TIMES, FUNCTION_EXTRA,
    ]
    .concat();
    all.sort_unstable();
    all.dedup();
    all
}

#[derive(Clone, Copy)]
enum Slot {
    Brand,
    Color,
    Material,
    Category,
    Audience,
    Modifier,
}

use Slot::*;

// Noun-phrase query shapes of 2..=6 words. Order within a query is fixed by
// slot kind; the category noun is always present.
const QUERY_TEMPLATES: &[&[Slot]] = &[
    &[Brand, Category],
    &[Color, Category],
    &[Category, Audience],
    &[Modifier, Category],
    &[Material, Category],
    &[Brand, Color, Category],
    &[Color, Material, Category],
    &[Modifier, Category, Audience],
    &[Brand, Category, Audience],
    &[Brand, Modifier, Category],
    &[Color, Category, Audience],
    &[Brand, Color, Material, Category],
    &[Modifier, Color, Category, Audience],
    &[Brand, Color, Category, Audience],
    &[Brand, Material, Category, Audience],
    &[Brand, Modifier, Color, Material, Category],
    &[Modifier, Brand, Color, Category, Audience],
    &[Brand, Modifier, Color, Material, Category, Audience],
];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.gen_range(0..xs.len())]
}

fn sample_query(rng: &mut ChaCha8Rng) -> String {
    let tpl = QUERY_TEMPLATES[rng.gen_range(0..QUERY_TEMPLATES.len())];
    tpl.iter()
        .map(|slot| match slot {
            Brand => pick(rng, BRANDS),
            Color => pick(rng, COLORS),
            Material => pick(rng, MATERIALS),
            Category => pick(rng, CATEGORIES),
            Audience => pick(rng, AUDIENCES),
            Modifier => pick(rng, MODIFIERS),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Out-of-domain object noun phrase. Product words show up, but brands and
/// modifiers only rarely, and some brands never.
fn sentence_object(rng: &mut ChaCha8Rng, out: &mut Vec<&'static str>) {
    out.push(pick(rng, DETERMINERS));
    if rng.gen_bool(0.35) {
        out.push(pick(rng, ADJECTIVES));
    }
    if rng.gen_bool(0.4) {
        out.push(pick(rng, COLORS));
    }
    if rng.gen_bool(0.15) {
        out.push(pick(rng, MATERIALS));
    }
    if rng.gen_bool(0.05) {
        out.push(pick(rng, &BRANDS[..OOD_BRANDS]));
    }
    if rng.gen_bool(0.03) {
        out.push(pick(rng, MODIFIERS));
    }
    if rng.gen_bool(0.6) {
        out.push(pick(rng, CATEGORIES));
    } else {
        out.push(pick(rng, NOUNS));
    }
}

fn sample_sentence(rng: &mut ChaCha8Rng) -> String {
    loop {
        let mut w: Vec<&'static str> = Vec::new();
        if rng.gen_bool(0.2) {
            w.push(pick(rng, TIMES));
        }
        w.push(pick(rng, DETERMINERS));
        if rng.gen_bool(0.3) {
            w.push(pick(rng, ADJECTIVES));
        }
        w.push(pick(rng, SUBJECTS));
        w.push(pick(rng, VERBS));
        sentence_object(rng, &mut w);
        if rng.gen_bool(0.25) {
            w.push("for");
            w.push("the");
            w.push(pick(rng, AUDIENCES));
        }
        if rng.gen_bool(0.6) {
            w.push(pick(rng, PREPOSITIONS));
            w.push("the");
            w.push(pick(rng, PLACES));
        }
        if rng.gen_bool(0.3) {
            w.push("and");
            w.push(pick(rng, VERBS));
            sentence_object(rng, &mut w);
        }
        if rng.gen_bool(0.15) {
            w.push("with");
            w.push(pick(rng, DETERMINERS));
            w.push(pick(rng, NOUNS));
        }
        if rng.gen_bool(0.1) {
            w.push("and");
            w.push("was");
            w.push("very");
            w.push(pick(rng, ADJECTIVES));
        }
        if (5..=12).contains(&w.len()) {
            return w.join(" ");
        }
    }
}

/// Per-split line counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSizes {
    pub pretrain_parallel: usize,
    pub mono_src: usize,
    pub mono_tgt: usize,
    pub validation_mono_src: usize,
    pub test_parallel: usize,
    pub finetune_parallel: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        CorpusSizes {
            pretrain_parallel: 5_000,
            mono_src: 20_000,
            mono_tgt: 20_000,
            validation_mono_src: 1_000,
            test_parallel: 1_000,
            finetune_parallel: 500,
        }
    }
}

impl CorpusSizes {
    fn check(&self) -> Result<()> {
        let named = [
            ("pretrain_parallel", self.pretrain_parallel),
            ("mono_src", self.mono_src),
            ("mono_tgt", self.mono_tgt),
            ("validation_mono_src", self.validation_mono_src),
            ("test_parallel", self.test_parallel),
            ("finetune_parallel", self.finetune_parallel),
        ];
        for (name, n) in named {
            if n == 0 {
                return Err(CorpusError::BadSize(name));
            }
        }
        Ok(())
    }
}

/// All splits of one synthetic experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusBundle {
    /// Out-of-domain `(src, tgt)` sentences.
    pub pretrain_parallel: Vec<(String, String)>,
    pub mono_src: Vec<String>,
    pub mono_tgt: Vec<String>,
    /// In-domain `(tgt, src)` queries; the evaluation direction is tgt → src.
    pub test_parallel: Vec<(String, String)>,
    pub finetune_parallel: Vec<(String, String)>,
    pub validation_mono_src: Vec<String>,
}

impl CorpusBundle {
    /// Every line that should be covered by the shared vocabulary.
    pub fn training_lines(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for (s, t) in &self.pretrain_parallel {
            out.push(s);
            out.push(t);
        }
        out.extend(self.mono_src.iter().map(String::as_str));
        out.extend(self.mono_tgt.iter().map(String::as_str));
        out
    }
}

struct UniqueDraw {
    seen: HashSet<String>,
}

impl UniqueDraw {
    fn take(
        &mut self,
        split: &'static str,
        n: usize,
        rng: &mut ChaCha8Rng,
        sample: fn(&mut ChaCha8Rng) -> String,
    ) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(n);
        let mut misses = 0usize;
        while out.len() < n {
            let line = nfc(&sample(rng));
            if self.seen.insert(line.clone()) {
                out.push(line);
                misses = 0;
            } else {
                misses += 1;
                if misses > 10_000 {
                    return Err(CorpusError::Exhausted {
                        split,
                        wanted: n,
                        got: out.len(),
                    });
                }
            }
        }
        Ok(out)
    }
}

/// The lexicon used by [`generate_bundle`] callers that do not bring their own.
pub fn default_cipher(seed: u64) -> CipherSpec {
    CipherSpec::random_for(
        &source_lexicon(),
        ReorderRule::Reverse,
        DEFAULT_TARGET_OFFSET,
        seed,
    )
    .expect("random lexicon is a bijection by construction")
}

/// Generates every split deterministically from `seed`.
///
/// In-domain splits (monolingual, validation, test, fine-tune) are pairwise
/// disjoint at the source-query level, and `mono_tgt` is the translation of a
/// source sample drawn independently of `mono_src`.
pub fn generate_bundle(seed: u64, sizes: &CorpusSizes, spec: &CipherSpec) -> Result<CorpusBundle> {
    sizes.check()?;
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tr = |s: &str| oracle_translate(s, spec, Direction::SrcToTgt);

    let mut ood = UniqueDraw {
        seen: HashSet::new(),
    };
    let pre_src = ood.take("pretrain_parallel", sizes.pretrain_parallel, &mut rng, sample_sentence)?;
    let pretrain_parallel = pre_src
        .into_iter()
        .map(|s| {
            let t = tr(&s)?;
            Ok((s, t))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut ind = UniqueDraw {
        seen: HashSet::new(),
    };
    let mono_src = ind.take("mono_src", sizes.mono_src, &mut rng, sample_query)?;
    let tgt_origin = ind.take("mono_tgt", sizes.mono_tgt, &mut rng, sample_query)?;
    let validation_mono_src = ind.take(
        "validation_mono_src",
        sizes.validation_mono_src,
        &mut rng,
        sample_query,
    )?;
    let test_src = ind.take("test_parallel", sizes.test_parallel, &mut rng, sample_query)?;
    let ft_src = ind.take("finetune_parallel", sizes.finetune_parallel, &mut rng, sample_query)?;

    // mono_tgt comes from a disjoint source sample, so no index can align with
    // mono_src; shuffle anyway so order carries no information either.
    let mut mono_tgt = tgt_origin.iter().map(|s| tr(s)).collect::<Result<Vec<_>>>()?;
    mono_tgt.shuffle(&mut rng);

    let to_pairs = |srcs: Vec<String>| -> Result<Vec<(String, String)>> {
        srcs.into_iter()
            .map(|s| {
                let t = tr(&s)?;
                Ok((t, s))
            })
            .collect()
    };

    Ok(CorpusBundle {
        pretrain_parallel,
        mono_src,
        mono_tgt,
        test_parallel: to_pairs(test_src)?,
        finetune_parallel: to_pairs(ft_src)?,
        validation_mono_src,
    })
}

// ---------------------------------------------------------------------------
// Files

pub fn write_mono(path: &Path, lines: &[String]) -> Result<()> {
    let mut buf = String::new();
    for l in lines {
        buf.push_str(&nfc(l));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_mono(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            return Err(CorpusError::Format {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "empty line".into(),
            });
        }
        out.push(nfc(line));
    }
    Ok(out)
}

pub fn write_parallel(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for (a, b) in pairs {
        writeln!(f, "{}\t{}", nfc(a), nfc(b)).map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

pub fn read_parallel(path: &Path) -> Result<Vec<(String, String)>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let line = line.trim_end_matches('\r');
        let mut parts = line.split('\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) if !a.trim().is_empty() && !b.trim().is_empty() => {
                out.push((nfc(a), nfc(b)))
            }
            _ => {
                return Err(CorpusError::Format {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "expected `source<TAB>target`".into(),
                })
            }
        }
    }
    Ok(out)
}

fn swapped(pairs: &[(String, String)]) -> Vec<(String, String)> {
    pairs.iter().map(|(a, b)| (b.clone(), a.clone())).collect()
}

/// Reads a `source<TAB>target` file as `(tgt, src)` pairs, the order of the
/// test and fine-tuning splits.
pub fn read_query_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    Ok(swapped(&read_parallel(path)?))
}

/// Split filenames, seed, sizes and the cipher; written as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub seed: u64,
    pub sizes: CorpusSizes,
    pub files: BTreeMap<String, String>,
    pub cipher: CipherSpec,
}

pub const MANIFEST_FILE: &str = "manifest.json";

const SPLIT_FILES: [(&str, &str); 6] = [
    ("pretrain_parallel", "pretrain.tsv"),
    ("mono_src", "mono.src"),
    ("mono_tgt", "mono.tgt"),
    ("validation_mono_src", "valid.src"),
    ("test_parallel", "test.tsv"),
    ("finetune_parallel", "finetune.tsv"),
];

/// Writes all splits plus the manifest into `dir` (created if missing).
pub fn write_bundle(
    dir: &Path,
    bundle: &CorpusBundle,
    seed: u64,
    sizes: &CorpusSizes,
    spec: &CipherSpec,
) -> Result<BundleManifest> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files: BTreeMap<String, String> = SPLIT_FILES
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    write_parallel(&dir.join(&files["pretrain_parallel"]), &bundle.pretrain_parallel)?;
    write_mono(&dir.join(&files["mono_src"]), &bundle.mono_src)?;
    write_mono(&dir.join(&files["mono_tgt"]), &bundle.mono_tgt)?;
    write_mono(&dir.join(&files["validation_mono_src"]), &bundle.validation_mono_src)?;
    write_parallel(&dir.join(&files["test_parallel"]), &swapped(&bundle.test_parallel))?;
    write_parallel(&dir.join(&files["finetune_parallel"]), &swapped(&bundle.finetune_parallel))?;
    let manifest = BundleManifest {
        seed,
        sizes: *sizes,
        files,
        cipher: spec.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CorpusError::Manifest(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<BundleManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: BundleManifest =
        serde_json::from_str(&text).map_err(|e| CorpusError::Manifest(e.to_string()))?;
    manifest.cipher.validate()?;
    Ok(manifest)
}

/// Loads a bundle written by [`write_bundle`].
pub fn read_bundle(dir: &Path) -> Result<(CorpusBundle, BundleManifest)> {
    let manifest = read_manifest(dir)?;
    let file = |key: &str| -> Result<PathBuf> {
        manifest
            .files
            .get(key)
            .map(|f| dir.join(f))
            .ok_or_else(|| CorpusError::Manifest(format!("missing split `{key}`")))
    };
    let bundle = CorpusBundle {
        pretrain_parallel: read_parallel(&file("pretrain_parallel")?)?,
        mono_src: read_mono(&file("mono_src")?)?,
        mono_tgt: read_mono(&file("mono_tgt")?)?,
        test_parallel: read_query_pairs(&file("test_parallel")?)?,
        finetune_parallel: read_query_pairs(&file("finetune_parallel")?)?,
        validation_mono_src: read_mono(&file("validation_mono_src")?)?,
    };
    Ok((bundle, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn greek() -> CipherSpec {
        // Greek capitals: 'a' + 0x330 = U+0391
        CipherSpec::new(
            [("red", "ΡΕΔ"), ("shirt", "ΣΗΙΡΤ")],
            ReorderRule::Reverse,
            0x330,
        )
        .unwrap()
    }

    #[test]
    fn oracle_reverse_example() {
        let spec = greek();
        let out = oracle_translate("red shirt", &spec, Direction::SrcToTgt).unwrap();
        assert_eq!(out, "ΣΗΙΡΤ ΡΕΔ");
        let back = oracle_translate(&out, &spec, Direction::TgtToSrc).unwrap();
        assert_eq!(back, "red shirt");
    }

    #[test]
    fn oracle_rejects_unknown_word() {
        let err = oracle_translate("blue shirt", &greek(), Direction::SrcToTgt).unwrap_err();
        assert!(err.to_string().contains("blue"));
    }

    #[test]
    fn detection_by_character_block() {
        let spec = greek();
        assert_eq!(detect_language("red shirt", &spec).unwrap(), LanguageId::Src);
        assert_eq!(detect_language("ΣΗΙΡΤ ΡΕΔ", &spec).unwrap(), LanguageId::Tgt);
        assert_eq!(detect_language("red ΣΗΙΡΤ", &spec).unwrap(), LanguageId::Tgt);
        // non-ASCII outside the block stays source
        assert_eq!(detect_language("café", &spec).unwrap(), LanguageId::Src);
        assert!(detect_language("  ", &spec).is_err());
    }

    #[test]
    fn collision_names_both_words() {
        let err = CipherSpec::new(
            [("red", "ΡΕΔ"), ("rose", "ΡΕΔ")],
            ReorderRule::Identity,
            0x330,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("red") && msg.contains("rose"), "{msg}");
    }

    #[test]
    fn target_word_must_use_block() {
        let err = CipherSpec::new([("red", "xyz")], ReorderRule::Identity, 0x330).unwrap_err();
        assert!(matches!(err, CorpusError::TargetOutsideBlock(_)));
    }

    #[test]
    fn single_line_bundle() {
        let spec = CipherSpec::new([("red", "ρεδ")], ReorderRule::Identity, 0x350).unwrap();
        // the grammar needs its own lexicon; a one-word map can't cover it
        let sizes = CorpusSizes {
            pretrain_parallel: 1,
            mono_src: 1,
            mono_tgt: 1,
            validation_mono_src: 1,
            test_parallel: 1,
            finetune_parallel: 1,
        };
        assert!(matches!(
            generate_bundle(7, &sizes, &spec),
            Err(CorpusError::OutOfLexicon(_))
        ));
        let spec = default_cipher(7);
        let b = generate_bundle(7, &sizes, &spec).unwrap();
        assert_eq!(b.mono_src.len(), 1);
        let lex = source_lexicon();
        assert!(b.mono_src[0].split(' ').all(|w| lex.contains(&w)));
    }

    #[test]
    fn zero_size_rejected() {
        let sizes = CorpusSizes {
            test_parallel: 0,
            ..CorpusSizes::default()
        };
        assert!(matches!(
            generate_bundle(1, &sizes, &default_cipher(1)),
            Err(CorpusError::BadSize("test_parallel"))
        ));
    }

    #[test]
    fn default_cipher_is_valid_and_in_cyrillic() {
        let spec = default_cipher(3);
        spec.validate().unwrap();
        assert_eq!(spec.target_block(), (0x430, 0x449));
        for t in spec.lexicon_map.values() {
            assert!(t.chars().all(|c| spec.in_target_block(c)));
            assert!(t.chars().count() >= 3);
        }
    }

    #[test]
    fn tsv_rejects_missing_tab() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tsv");
        fs::write(&p, "a\tb\nno tab here\n").unwrap();
        let err = read_parallel(&p).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }
}
