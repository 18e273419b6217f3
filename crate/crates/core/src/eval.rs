//! Corpus BLEU, round-trip validation, the patience rule and test-set scoring.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{detect_language, nfc, oracle_translate, CipherSpec, Direction, LanguageId};
use crate::model::{beam_decode, default_max_new, ModelParams};
use crate::tokenizer::Vocabulary;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("hypothesis/reference count mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty corpus")]
    Empty,
}

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<'b, 'a>(words: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

#[derive(Default, Clone, Copy)]
struct Stats {
    matches: [usize; MAX_ORDER],
    totals: [usize; MAX_ORDER],
    hyp_len: usize,
    ref_len: usize,
}

impl Stats {
    fn merge(mut self, o: Stats) -> Stats {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
        self
    }
}

fn sentence_stats(hyp: &str, reference: &str) -> Stats {
    let h = nfc(hyp);
    let r = nfc(reference);
    let hw: Vec<&str> = h.split_whitespace().collect();
    let rw: Vec<&str> = r.split_whitespace().collect();
    let mut s = Stats {
        hyp_len: hw.len(),
        ref_len: rw.len(),
        ..Stats::default()
    };
    for n in 1..=MAX_ORDER {
        let hc = ngram_counts(&hw, n);
        let rc = ngram_counts(&rw, n);
        s.matches[n - 1] = hc
            .iter()
            .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
            .sum();
        s.totals[n - 1] = hw.len().saturating_sub(n - 1);
    }
    s
}

/// Corpus-level BLEU with clipped n-gram counts (n = 1..4), brevity penalty
/// and add-one smoothing for orders >= 2 that have no match. Unigram
/// precision is never smoothed.
pub fn corpus_bleu<H: AsRef<str> + Sync, R: AsRef<str> + Sync>(
    hypotheses: &[H],
    references: &[R],
) -> Result<BleuReport, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::LengthMismatch(hypotheses.len(), references.len()));
    }
    if hypotheses.is_empty() {
        return Err(EvalError::Empty);
    }
    let st = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| sentence_stats(h.as_ref(), r.as_ref()))
        .fold(Stats::default(), Stats::merge);
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        let (m, t) = (st.matches[n] as f64, st.totals[n] as f64);
        precisions[n] = if n > 0 && st.matches[n] == 0 {
            (m + 1.0) / (t + 1.0)
        } else if st.totals[n] == 0 {
            0.0
        } else {
            m / t
        };
    }
    let brevity_penalty = if st.hyp_len >= st.ref_len {
        1.0
    } else if st.hyp_len == 0 {
        0.0
    } else {
        (1.0 - st.ref_len as f64 / st.hyp_len as f64).exp()
    };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        (brevity_penalty * mean_log.exp() * 100.0).clamp(0.0, 100.0)
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len: st.hyp_len,
        ref_len: st.ref_len,
    })
}

/// Anything that can translate a batch of lines into a target language.
pub trait Translator: Sync {
    fn translate(&self, lines: &[String], to: LanguageId) -> Vec<String>;
}

/// Beam-search translation with a trained model.
pub struct ModelTranslator<'a> {
    pub params: &'a ModelParams<f32>,
    pub vocab: &'a Vocabulary,
    pub beam: usize,
}

impl ModelTranslator<'_> {
    pub fn translate_one(&self, line: &str, to: LanguageId) -> String {
        let Ok(seq) = self.vocab.encode(line, to.other()) else {
            return String::new();
        };
        let max_new = default_max_new(seq.ids.len());
        match beam_decode(self.params, &seq, to, self.beam, max_new) {
            Ok(out) => self.vocab.decode_seq(&out).unwrap_or_default(),
            Err(e) => {
                log::warn!("translation failed for {line:?}: {e}");
                String::new()
            }
        }
    }
}

impl Translator for ModelTranslator<'_> {
    fn translate(&self, lines: &[String], to: LanguageId) -> Vec<String> {
        lines.par_iter().map(|l| self.translate_one(l, to)).collect()
    }
}

/// The ground-truth cipher, for calibrating metrics.
pub struct OracleTranslator<'a>(pub &'a CipherSpec);

impl Translator for OracleTranslator<'_> {
    fn translate(&self, lines: &[String], to: LanguageId) -> Vec<String> {
        let dir = match to {
            LanguageId::Tgt => Direction::SrcToTgt,
            LanguageId::Src => Direction::TgtToSrc,
        };
        lines
            .iter()
            .map(|l| oracle_translate(l, self.0, dir).unwrap_or_default())
            .collect()
    }
}

/// Returns its input unchanged: the degenerate round-trip case.
pub struct CopyTranslator;

impl Translator for CopyTranslator {
    fn translate(&self, lines: &[String], _to: LanguageId) -> Vec<String> {
        lines.to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTripReport {
    pub bleu: BleuReport,
    /// Share of intermediate translations detected as the target language.
    pub target_fraction: f64,
}

/// Source → target → source, scored against the originals.
pub fn round_trip_validate<T: Translator + ?Sized>(
    translator: &T,
    validation_src: &[String],
    spec: &CipherSpec,
) -> Result<RoundTripReport, EvalError> {
    if validation_src.is_empty() {
        return Err(EvalError::Empty);
    }
    let mid = translator.translate(validation_src, LanguageId::Tgt);
    let back = translator.translate(&mid, LanguageId::Src);
    let in_target = mid
        .iter()
        .filter(|m| matches!(detect_language(m, spec), Ok(LanguageId::Tgt)))
        .count();
    Ok(RoundTripReport {
        bleu: corpus_bleu(&back, validation_src)?,
        target_fraction: in_target as f64 / mid.len() as f64,
    })
}

/// Translates the target side of `(tgt, src)` pairs and scores it against
/// the source side.
pub fn evaluate_testset<T: Translator + ?Sized>(
    translator: &T,
    test_parallel: &[(String, String)],
) -> Result<BleuReport, EvalError> {
    if test_parallel.is_empty() {
        return Err(EvalError::Empty);
    }
    let inputs: Vec<String> = test_parallel.iter().map(|(t, _)| t.clone()).collect();
    let refs: Vec<&str> = test_parallel.iter().map(|(_, s)| s.as_str()).collect();
    let hyps = translator.translate(&inputs, LanguageId::Src);
    corpus_bleu(&hyps, &refs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stop once the last `patience` entries all fail to exceed the best value
/// seen before them.
pub fn early_stop_check(history: &[f64], patience: usize) -> StopDecision {
    let patience = patience.max(1);
    if history.len() <= patience {
        return StopDecision::Continue;
    }
    let split = history.len() - patience;
    let best_before = history[..split].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if history[split..].iter().all(|&v| v <= best_before) {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_100() {
        let r = corpus_bleu(&["a b c d"], &["a b c d"]).unwrap();
        assert_eq!(r.bleu, 100.0);
        assert_eq!(r.precisions, [1.0; 4]);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn short_hypothesis() {
        let r = corpus_bleu(&["a b c d"], &["a b c d e"]).unwrap();
        assert_eq!(r.precisions, [1.0; 4]);
        let bp = (1.0f64 - 5.0 / 4.0).exp();
        assert!((r.brevity_penalty - bp).abs() < 1e-12);
        assert!((r.bleu - 100.0 * bp).abs() < 1e-9);
    }

    #[test]
    fn zero_unigram_is_zero() {
        let r = corpus_bleu(&["x y z w"], &["a b c d"]).unwrap();
        assert_eq!(r.precisions[0], 0.0);
        assert_eq!(r.bleu, 0.0);
    }

    #[test]
    fn errors() {
        assert_eq!(
            corpus_bleu(&["a"], &["a", "b"]).unwrap_err(),
            EvalError::LengthMismatch(1, 2)
        );
        let none: [&str; 0] = [];
        assert_eq!(corpus_bleu(&none, &none).unwrap_err(), EvalError::Empty);
    }

    #[test]
    fn clipping() {
        // "the the the" vs "the cat": unigram clipped to 1/3
        let r = corpus_bleu(&["the the the"], &["the cat"]).unwrap();
        assert!((r.precisions[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn patience_rule() {
        use StopDecision::*;
        assert_eq!(early_stop_check(&[10.0, 12.0, 11.0, 11.5, 11.9], 3), Stop);
        assert_eq!(early_stop_check(&[10.0, 12.0, 11.0, 12.5], 3), Continue);
        assert_eq!(early_stop_check(&[5.0, 5.0, 5.0], 3), Continue);
        assert_eq!(early_stop_check(&[5.0, 5.0, 5.0, 5.0], 3), Stop);
        assert_eq!(early_stop_check(&[], 3), Continue);
    }

    #[test]
    fn copy_translator_round_trips_perfectly() {
        let spec = crate::corpus::default_cipher(1);
        let lines = vec!["red shirt".to_string(), "nike shoes men".to_string()];
        let rt = round_trip_validate(&CopyTranslator, &lines, &spec).unwrap();
        assert_eq!(rt.bleu.bleu, 100.0);
        // intermediates never left the source script
        assert_eq!(rt.target_fraction, 0.0);
        let rt = round_trip_validate(&OracleTranslator(&spec), &lines, &spec).unwrap();
        assert_eq!(rt.bleu.bleu, 100.0);
        assert_eq!(rt.target_fraction, 1.0);
    }
}
