use proptest::prelude::*;

use unmt::analysis::{classical_mds, feature_overlap_report, EmbeddingCloud};
use unmt::corpus::{default_cipher, oracle_translate, source_lexicon, Direction, LanguageId};
use unmt::eval::{corpus_bleu, early_stop_check, StopDecision};
use unmt::tensor::Mat;
use unmt::tokenizer::Vocabulary;
use unmt::training::Adam;

fn lexicon_line() -> impl Strategy<Value = String> {
    let lex = source_lexicon();
    prop::collection::vec(prop::sample::select(lex), 1..12).prop_map(|w| w.join(" "))
}

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,9}"
}

fn distances(p: &[[f64; 2]]) -> Vec<f64> {
    let mut d = Vec::new();
    for a in p {
        for b in p {
            d.push(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
        }
    }
    d
}

fn cloud_points() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 20..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cipher_round_trips(line in lexicon_line(), seed in 0u64..50) {
        let spec = default_cipher(seed);
        let tgt = oracle_translate(&line, &spec, Direction::SrcToTgt).unwrap();
        prop_assert!(tgt.chars().filter(|c| !c.is_whitespace()).all(|c| spec.in_target_block(c)));
        prop_assert_eq!(oracle_translate(&tgt, &spec, Direction::TgtToSrc).unwrap(), line);
    }

    #[test]
    fn tokenizer_round_trips_known_characters(
        corpus in prop::collection::vec(prop::collection::vec(word(), 1..6), 1..8),
        probe in prop::collection::vec(word(), 1..10),
    ) {
        let mut lines: Vec<String> = corpus.iter().map(|w| w.join(" ")).collect();
        // make every lowercase letter known so any probe word can fall back to characters
        lines.push(('a'..='z').map(String::from).collect::<Vec<_>>().join(" "));
        let vocab = Vocabulary::build(&lines).unwrap();
        let line = probe.join(" ");
        let seq = vocab.encode(&line, LanguageId::Src).unwrap();
        prop_assert_eq!(vocab.decode_seq(&seq).unwrap(), line);
    }

    #[test]
    fn bleu_is_bounded_and_order_free(
        pairs in prop::collection::vec((prop::collection::vec(word(), 1..8), prop::collection::vec(word(), 1..8)), 1..10),
        rot in 0usize..10,
    ) {
        let hyps: Vec<String> = pairs.iter().map(|p| p.0.join(" ")).collect();
        let refs: Vec<String> = pairs.iter().map(|p| p.1.join(" ")).collect();
        let a = corpus_bleu(&hyps, &refs).unwrap();
        prop_assert!((0.0..=100.0).contains(&a.bleu));
        let k = rot % hyps.len();
        let (mut h2, mut r2) = (hyps.clone(), refs.clone());
        h2.rotate_left(k);
        r2.rotate_left(k);
        let b = corpus_bleu(&h2, &r2).unwrap();
        prop_assert!((a.bleu - b.bleu).abs() < 1e-9);
    }

    #[test]
    fn early_stop_matches_its_definition(
        history in prop::collection::vec(0.0f64..5.0, 0..20),
        patience in 1usize..5,
    ) {
        let want = if history.len() <= patience {
            StopDecision::Continue
        } else {
            let (before, recent) = history.split_at(history.len() - patience);
            let best = before.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if recent.iter().all(|&x| x <= best) { StopDecision::Stop } else { StopDecision::Continue }
        };
        prop_assert_eq!(early_stop_check(&history, patience), want);
    }

    #[test]
    fn mds_ignores_translation(points in cloud_points(), shift in prop::collection::vec(-50.0f64..50.0, 3)) {
        let moved: Vec<Vec<f64>> = points.iter().map(|p| p.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
        let a = distances(&classical_mds(&points).unwrap());
        let b = distances(&classical_mds(&moved).unwrap());
        let scale = a.iter().copied().fold(1.0, f64::max);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-6 * scale, "{} vs {}", x, y);
        }
    }

    #[test]
    fn overlap_ignores_rigid_motion(points in cloud_points(), shift in prop::collection::vec(-50.0f64..50.0, 3)) {
        let label = |i: usize| if i % 2 == 0 { LanguageId::Src } else { LanguageId::Tgt };
        let mut a = EmbeddingCloud::new(points.iter().enumerate().map(|(i, p)| (p.clone(), label(i))).collect());
        // swap two axes, flip one, then translate
        let moved = points
            .iter()
            .enumerate()
            .map(|(i, p)| (vec![p[1] + shift[0], -p[0] + shift[1], p[2] + shift[2]], label(i)))
            .collect();
        let mut b = EmbeddingCloud::new(moved);
        a.project().unwrap();
        b.project().unwrap();
        prop_assert_eq!(feature_overlap_report(&a).unwrap(), feature_overlap_report(&b).unwrap());
    }

    #[test]
    fn adam_with_zero_rate_changes_nothing(values in prop::collection::vec(-3.0f32..3.0, 1..30), g in -3.0f32..3.0) {
        let mut params = vec![Mat::from_vec(1, values.len(), values.clone())];
        let grads = vec![Some(Mat::filled(1, values.len(), g))];
        let mut opt = Adam::new(1, 0.0);
        for _ in 0..3 {
            opt.step(&mut params, &grads, 1.0);
        }
        prop_assert_eq!(&params[0].data, &values);
    }
}
