//! Corruption operators for the denoising objective.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::MASK_STR;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Mask,
    DropChar,
    Shuffle,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::Mask, NoiseKind::DropChar, NoiseKind::Shuffle];

    pub fn apply<R: Rng + ?Sized>(self, line: &str, rng: &mut R) -> String {
        match self {
            NoiseKind::Mask => apply_mask(line, rng),
            NoiseKind::DropChar => apply_dropchar(line, rng),
            NoiseKind::Shuffle => apply_shuffle(line, rng),
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mask" => Ok(NoiseKind::Mask),
            "dropchar" => Ok(NoiseKind::DropChar),
            "shuffle" => Ok(NoiseKind::Shuffle),
            other => Err(format!("unknown noise kind `{other}`")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("no noise kind enabled")]
pub struct NoNoiseEnabled;

/// Replaces one uniformly chosen word with `[MASK]`.
pub fn apply_mask<R: Rng + ?Sized>(line: &str, rng: &mut R) -> String {
    let mut words: Vec<&str> = line.split_whitespace().collect();
    if words.is_empty() {
        return line.to_string();
    }
    let i = rng.gen_range(0..words.len());
    words[i] = MASK_STR;
    words.join(" ")
}

/// Lower and upper bound of the per-line fraction of eligible words that lose
/// a character.
pub const DROPCHAR_FRACTION: (f64, f64) = (0.30, 0.50);

/// Drops one interior character from a random 30-50% of the words that have
/// at least three characters. At least one word is altered whenever any is
/// eligible.
pub fn apply_dropchar<R: Rng + ?Sized>(line: &str, rng: &mut R) -> String {
    let words: Vec<Vec<char>> = line.split_whitespace().map(|w| w.chars().collect()).collect();
    let eligible: Vec<usize> = (0..words.len()).filter(|&i| words[i].len() >= 3).collect();
    if eligible.is_empty() {
        return words
            .iter()
            .map(|w| w.iter().collect::<String>())
            .collect::<Vec<_>>()
            .join(" ");
    }
    let frac = rng.gen_range(DROPCHAR_FRACTION.0..=DROPCHAR_FRACTION.1);
    let count = ((frac * eligible.len() as f64).round() as usize).clamp(1, eligible.len());
    let mut out = words;
    for pick in index::sample(rng, eligible.len(), count) {
        let w = &mut out[eligible[pick]];
        let pos = rng.gen_range(1..w.len() - 1);
        w.remove(pos);
    }
    out.iter()
        .map(|w| w.iter().collect::<String>())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Uniformly random permutation of the words.
pub fn apply_shuffle<R: Rng + ?Sized>(line: &str, rng: &mut R) -> String {
    let mut words: Vec<&str> = line.split_whitespace().collect();
    words.shuffle(rng);
    words.join(" ")
}

pub fn sample_noise_kind<R: Rng + ?Sized>(
    enabled: &[NoiseKind],
    rng: &mut R,
) -> Result<NoiseKind, NoNoiseEnabled> {
    enabled.choose(rng).copied().ok_or(NoNoiseEnabled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_single_word() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(apply_mask("shirt", &mut rng), "[MASK]");
    }

    #[test]
    fn mask_outcome_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let allowed = ["[MASK] cotton shirt", "red [MASK] shirt", "red cotton [MASK]"];
        for _ in 0..50 {
            let out = apply_mask("red cotton shirt", &mut rng);
            assert!(allowed.contains(&out.as_str()), "{out}");
        }
    }

    #[test]
    fn dropchar_short_words_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(apply_dropchar("ab cd", &mut rng), "ab cd");
    }

    #[test]
    fn dropchar_keeps_ends() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let out = apply_dropchar("shirt", &mut rng);
            assert!(["sirt", "shrt", "shit"].contains(&out.as_str()), "{out}");
        }
    }

    #[test]
    fn dropchar_on_three_letter_word() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(apply_dropchar("cap", &mut rng), "cp");
    }

    #[test]
    fn shuffle_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(apply_shuffle("shirt", &mut rng), "shirt");
    }

    #[test]
    fn sampler() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_noise_kind(&[NoiseKind::Mask], &mut rng), Ok(NoiseKind::Mask));
        assert_eq!(sample_noise_kind(&[], &mut rng), Err(NoNoiseEnabled));
        let a: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..20).map(|_| sample_noise_kind(&NoiseKind::ALL, &mut r).unwrap()).collect()
        };
        let b: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..20).map(|_| sample_noise_kind(&NoiseKind::ALL, &mut r).unwrap()).collect()
        };
        assert_eq!(a, b);
    }
}
