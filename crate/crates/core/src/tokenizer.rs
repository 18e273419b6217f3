//! Shared word-level vocabulary with a character fallback.
//!
//! Words seen in the corpora get a single token. Any other word is spelled out
//! with character tokens: the first character uses its bare form (`s`), every
//! following character carries the continuation prefix (`##h`). A token
//! without the prefix therefore always starts a new word, which keeps word
//! boundaries unambiguous.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::LanguageId;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const MASK: TokenId = 4;
pub const LANG_SRC: TokenId = 5;
pub const LANG_TGT: TokenId = 6;
pub const NUM_SPECIALS: usize = 7;

pub const MASK_STR: &str = "[MASK]";
pub const CONTINUATION: &str = "##";

const SPECIAL_STRINGS: [&str; NUM_SPECIALS] =
    ["<pad>", "<s>", "</s>", "<unk>", MASK_STR, "<lang:src>", "<lang:tgt>"];

const FILE_MAGIC: &str = "#unmt-vocab v1";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("cannot encode an empty line")]
    EmptyLine,
    #[error("unknown token id {0}")]
    UnknownId(TokenId),
    #[error("vocabulary file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

pub fn lang_token(lang: LanguageId) -> TokenId {
    match lang {
        LanguageId::Src => LANG_SRC,
        LanguageId::Tgt => LANG_TGT,
    }
}

/// An encoded line: its language plus token ids, never containing PAD.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub lang: LanguageId,
    pub ids: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_of: HashMap<String, TokenId>,
    string_of: Vec<String>,
    num_words: usize,
}

impl Vocabulary {
    /// Specials first, then words by descending frequency (ties
    /// lexicographic), then bare characters, then continuation characters.
    pub fn build<S: AsRef<str>>(corpora: &[S]) -> Result<Self> {
        if corpora.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        let mut chars: BTreeSet<char> = BTreeSet::new();
        for line in corpora {
            for w in line.as_ref().split_whitespace() {
                if w == MASK_STR {
                    continue;
                }
                *freq.entry(w).or_default() += 1;
                chars.extend(w.chars());
            }
        }
        let mut words: Vec<(&str, usize)> = freq.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let mut vocab = Vocabulary {
            id_of: HashMap::new(),
            string_of: Vec::new(),
            num_words: words.len(),
        };
        for s in SPECIAL_STRINGS {
            vocab.push(s.to_string());
        }
        for (w, _) in &words {
            vocab.push(w.to_string());
        }
        for c in &chars {
            let bare = c.to_string();
            if !vocab.id_of.contains_key(&bare) {
                vocab.push(bare);
            }
        }
        for c in &chars {
            vocab.push(format!("{CONTINUATION}{c}"));
        }
        Ok(vocab)
    }

    fn push(&mut self, s: String) {
        let id = self.string_of.len() as TokenId;
        self.id_of.insert(s.clone(), id);
        self.string_of.push(s);
    }

    pub fn len(&self) -> usize {
        self.string_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.string_of.is_empty()
    }

    /// Number of whole-word tokens (excluding specials and characters).
    pub fn num_words(&self) -> usize {
        self.num_words
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.string_of.get(id as usize).map(String::as_str)
    }

    /// Encodes and also returns characters that had to become UNK.
    pub fn encode_report(&self, line: &str, lang: LanguageId) -> Result<(TokenSequence, Vec<char>)> {
        let mut ids = Vec::new();
        let mut unknown = Vec::new();
        let mut any = false;
        for w in line.split_whitespace() {
            any = true;
            if w == MASK_STR {
                ids.push(MASK);
                continue;
            }
            if let Some(id) = self.id(w) {
                ids.push(id);
                continue;
            }
            let mut buf = String::with_capacity(CONTINUATION.len() + 4);
            for (i, c) in w.chars().enumerate() {
                buf.clear();
                if i > 0 {
                    buf.push_str(CONTINUATION);
                }
                buf.push(c);
                match self.id(&buf) {
                    Some(id) => ids.push(id),
                    None => {
                        ids.push(UNK);
                        unknown.push(c);
                    }
                }
            }
        }
        if !any {
            return Err(TokenizerError::EmptyLine);
        }
        if !unknown.is_empty() {
            log::debug!("encode: {} unknown character(s) in {line:?}", unknown.len());
        }
        Ok((TokenSequence { lang, ids }, unknown))
    }

    pub fn encode(&self, line: &str, lang: LanguageId) -> Result<TokenSequence> {
        self.encode_report(line, lang).map(|(seq, _)| seq)
    }

    /// Inverse of [`encode`](Self::encode) on its image. BOS, EOS, PAD and
    /// language tags are dropped; UNK renders as `<unk>`.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            match id {
                PAD | BOS | EOS | LANG_SRC | LANG_TGT => continue,
                _ => {}
            }
            let tok = self.token(id).ok_or(TokenizerError::UnknownId(id))?;
            if let Some(rest) = tok.strip_prefix(CONTINUATION).filter(|r| !r.is_empty()) {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        Ok(out)
    }

    pub fn decode_seq(&self, seq: &TokenSequence) -> Result<String> {
        self.decode(&seq.ids)
    }

    /// Text form: a header line with counts, then one token per line in id order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{FILE_MAGIC} size={} specials={NUM_SPECIALS} words={}",
            self.len(),
            self.num_words
        );
        for t in &self.string_of {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        let header = lines
            .next()
            .ok_or_else(|| TokenizerError::Format("missing header".into()))?;
        let mut size = None;
        let mut words = None;
        let mut fields = header.split(' ');
        if fields.next() != Some("#unmt-vocab") || fields.next() != Some("v1") {
            return Err(TokenizerError::Format(format!("bad header {header:?}")));
        }
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| TokenizerError::Format(format!("bad header field {f:?}")))?;
            let v: usize = v
                .parse()
                .map_err(|_| TokenizerError::Format(format!("bad count {f:?}")))?;
            match k {
                "size" => size = Some(v),
                "words" => words = Some(v),
                "specials" if v == NUM_SPECIALS => {}
                _ => return Err(TokenizerError::Format(format!("unexpected field {f:?}"))),
            }
        }
        let size = size.ok_or_else(|| TokenizerError::Format("missing size".into()))?;
        let num_words = words.ok_or_else(|| TokenizerError::Format("missing words".into()))?;
        let mut vocab = Vocabulary {
            id_of: HashMap::new(),
            string_of: Vec::with_capacity(size),
            num_words,
        };
        for _ in 0..size {
            let t = lines
                .next()
                .ok_or_else(|| TokenizerError::Format("truncated token list".into()))?;
            if vocab.id_of.contains_key(t) {
                return Err(TokenizerError::Format(format!("duplicate token {t:?}")));
            }
            vocab.push(t.to_string());
        }
        if lines.any(|l| !l.is_empty()) {
            return Err(TokenizerError::Format("trailing content".into()));
        }
        for (i, s) in SPECIAL_STRINGS.iter().enumerate() {
            if vocab.string_of.get(i).map(String::as_str) != Some(*s) {
                return Err(TokenizerError::Format(format!("special {i} is not {s:?}")));
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the text form, hex encoded. Checkpoints carry this.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Vocabulary {
        Vocabulary::build(&["red shirt", "red"]).unwrap()
    }

    #[test]
    fn specials_have_fixed_ids() {
        let v = small();
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(MASK), Some("[MASK]"));
        assert_eq!(v.id("[MASK]"), Some(MASK));
        assert_eq!(v.token(LANG_TGT), Some("<lang:tgt>"));
    }

    #[test]
    fn build_layout() {
        let v = small();
        // red (2) before shirt (1)
        assert_eq!(v.id("red"), Some(7));
        assert_eq!(v.id("shirt"), Some(8));
        for c in ["d", "e", "h", "i", "r", "s", "t"] {
            assert!(v.id(c).is_some(), "{c}");
            assert!(v.id(&format!("##{c}")).is_some(), "##{c}");
        }
        assert_eq!(v.len(), 7 + 2 + 7 + 7);
        assert_eq!(v.num_words(), 2);
    }

    #[test]
    fn order_insensitive() {
        let a = Vocabulary::build(&["a b c", "b c", "c"]).unwrap();
        let b = Vocabulary::build(&["c", "a b c", "b c"]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn empty_inputs() {
        let none: [&str; 0] = [];
        assert!(matches!(Vocabulary::build(&none), Err(TokenizerError::EmptyCorpus)));
        assert!(matches!(
            small().encode("   ", LanguageId::Src),
            Err(TokenizerError::EmptyLine)
        ));
    }

    #[test]
    fn word_and_mask() {
        let v = small();
        let s = v.encode("red shirt", LanguageId::Src).unwrap();
        assert_eq!(s.ids, vec![v.id("red").unwrap(), v.id("shirt").unwrap()]);
        let m = v.encode("red [MASK]", LanguageId::Src).unwrap();
        assert_eq!(m.ids, vec![v.id("red").unwrap(), MASK]);
        assert_eq!(v.decode(&m.ids).unwrap(), "red [MASK]");
    }

    #[test]
    fn char_fallback_roundtrip() {
        let v = small();
        let s = v.encode("shrt", LanguageId::Src).unwrap();
        assert!(!s.ids.contains(&UNK));
        assert_eq!(s.ids.len(), 4);
        assert_eq!(v.decode(&s.ids).unwrap(), "shrt");
        let mixed = v.encode("shrt red", LanguageId::Src).unwrap();
        assert_eq!(v.decode(&mixed.ids).unwrap(), "shrt red");
        // two fallback words in a row keep their boundary
        let two = v.encode("shrt sirt", LanguageId::Src).unwrap();
        assert_eq!(v.decode(&two.ids).unwrap(), "shrt sirt");
    }

    #[test]
    fn unknown_char_becomes_unk() {
        let v = small();
        let (s, unknown) = v.encode_report("rex", LanguageId::Src).unwrap();
        assert_eq!(unknown, vec!['x']);
        assert_eq!(s.ids.last(), Some(&UNK));
    }

    #[test]
    fn decode_strips_framing_and_rejects_bad_ids() {
        let v = small();
        let red = v.id("red").unwrap();
        assert_eq!(v.decode(&[LANG_SRC, BOS, red, EOS, PAD]).unwrap(), "red");
        assert!(matches!(v.decode(&[999]), Err(TokenizerError::UnknownId(999))));
    }

    #[test]
    fn text_form_roundtrip() {
        let v = Vocabulary::build(&["ΣΗΙΡΤ ΡΕΔ", "red shirt"]).unwrap();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(v, back);
        assert!(Vocabulary::from_text("garbage\n").is_err());
    }
}
