use std::collections::BTreeSet;

use unmt::corpus::{CorpusSizes, LanguageId};
use unmt::eval::{round_trip_validate, ModelTranslator};
use unmt::experiment::{prepare, Prepared};
use unmt::model::{ModelConfig, ModelParams};
use unmt::noise::NoiseKind;
use unmt::training::{
    adversarial_step, denoise_step, finetune, one_time_backtranslation_pairs, supervised_grads, train_adapt,
    Discriminator, Example, Trainer, TrainConfig,
};

fn small() -> Prepared {
    let sizes = CorpusSizes {
        pretrain_parallel: 200,
        mono_src: 100,
        mono_tgt: 100,
        validation_mono_src: 40,
        test_parallel: 40,
        finetune_parallel: 20,
    };
    prepare(3, &sizes).unwrap()
}

fn tiny(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 32,
        max_len: 24,
        vocab_size,
        dropout: 0.0,
    }
}

fn same(a: &ModelParams<f32>, b: &ModelParams<f32>) -> bool {
    a.tensors == b.tensors
}

#[test]
fn adversarial_updates_are_isolated() {
    let prep = small();
    let params = ModelParams::<f32>::init(tiny(prep.vocab.len()), 1).unwrap();
    let src = &prep.bundle.mono_src[..8];
    let tgt = &prep.bundle.mono_tgt[..8];

    // discriminator frozen by a zero rate: only the encoder moves
    let cfg = TrainConfig { adv_disc_lr: 0.0, ..TrainConfig::default() };
    let mut trainer = Trainer::new(params.clone(), 1e-3, 0.1, 1.0, 0);
    let mut disc = Discriminator::new(16, cfg.adv_disc_hidden, cfg.adv_disc_lr, 0);
    let disc_before = disc.tensors.clone();
    adversarial_step(&mut trainer, &mut disc, &prep.vocab, src, tgt, &cfg).unwrap();
    assert_eq!(disc.tensors, disc_before);
    assert!(!same(&trainer.params, &params));
    let dec = params.index_of("dec.0.ffn.w1").unwrap();
    assert_eq!(trainer.params.tensors[dec], params.tensors[dec], "decoder must not move");

    // generator frozen: only the discriminator moves
    let cfg = TrainConfig::default();
    let mut trainer = Trainer::new(params.clone(), 0.0, 0.1, 1.0, 0);
    let mut disc = Discriminator::new(16, cfg.adv_disc_hidden, cfg.adv_disc_lr, 0);
    let disc_before = disc.tensors.clone();
    adversarial_step(&mut trainer, &mut disc, &prep.vocab, src, tgt, &cfg).unwrap();
    assert_ne!(disc.tensors, disc_before);
    assert!(same(&trainer.params, &params));
}

#[test]
fn zero_learning_rate_is_identity() {
    let prep = small();
    let params = ModelParams::<f32>::init(tiny(prep.vocab.len()), 2).unwrap();
    let mut trainer = Trainer::new(params.clone(), 0.0, 0.1, 1.0, 0);
    for _ in 0..3 {
        denoise_step(&mut trainer, &prep.vocab, &prep.bundle.mono_src[..4], LanguageId::Src, NoiseKind::Mask).unwrap();
    }
    assert!(same(&trainer.params, &params));
}

#[test]
fn denoising_overfits_a_few_lines() {
    let prep = small();
    let params = ModelParams::<f32>::init(tiny(prep.vocab.len()), 4).unwrap();
    let lines = &prep.bundle.mono_src[..4];
    let mut trainer = Trainer::new(params, 3e-3, 0.0, 1.0, 0);
    let first = denoise_step(&mut trainer, &prep.vocab, lines, LanguageId::Src, NoiseKind::Shuffle).unwrap();
    let mut last = first;
    for _ in 0..300 {
        last = denoise_step(&mut trainer, &prep.vocab, lines, LanguageId::Src, NoiseKind::Shuffle).unwrap();
    }
    assert!(last < first / 4.0, "loss {first} -> {last}");
}

#[test]
fn batch_loss_is_the_token_weighted_mean() {
    let prep = small();
    let params = ModelParams::<f64>::init(tiny(prep.vocab.len()), 5).unwrap();
    let enc = |l: &str, lang| prep.vocab.encode(l, lang).unwrap();
    let (t, s) = &prep.bundle.test_parallel[0];
    let (t2, s2) = &prep.bundle.test_parallel[1];
    let a = Example::new(&enc(t, LanguageId::Tgt), &enc(s, LanguageId::Src));
    let b = Example::new(&enc(t2, LanguageId::Tgt), &enc(s2, LanguageId::Src));

    let (alone_a, _) = supervised_grads(&params, std::slice::from_ref(&a), 0.1, None).unwrap();
    let (alone_b, _) = supervised_grads(&params, std::slice::from_ref(&b), 0.1, None).unwrap();
    let (na, nb) = (a.tgt_out.len() as f64, b.tgt_out.len() as f64);
    assert_ne!(na, nb);
    let (pair, _) = supervised_grads(&params, &[a, b], 0.1, None).unwrap();
    let want = (alone_a * na + alone_b * nb) / (na + nb);
    assert!((pair - want).abs() < 1e-12, "{pair} vs {want}");
}

#[test]
fn zero_smoothing_is_cross_entropy() {
    let prep = small();
    let params = ModelParams::<f64>::init(tiny(prep.vocab.len()), 6).unwrap();
    let src = prep.vocab.encode(&prep.bundle.mono_src[0], LanguageId::Src).unwrap();
    let ex = Example::new(&src, &src);
    let (loss, _) = supervised_grads(&params, std::slice::from_ref(&ex), 0.0, None).unwrap();

    let mem = params.encode_eval(&ex.src).unwrap();
    let mut nll = 0.0;
    for t in 0..ex.tgt_out.len() {
        let lp = params.next_log_probs(&mem, &ex.tgt_in[..=t]).unwrap();
        nll -= lp[ex.tgt_out[t] as usize];
    }
    let want = nll / ex.tgt_out.len() as f64;
    assert!((loss - want).abs() < 1e-9 * want.abs(), "{loss} vs {want}");
}

#[test]
fn no_objectives_and_no_labels_leave_the_model_alone() {
    let prep = small();
    let params = ModelParams::<f32>::init(tiny(prep.vocab.len()), 7).unwrap();
    let cfg = TrainConfig { enabled_objectives: BTreeSet::new(), ..TrainConfig::default() };
    let (out, report) = train_adapt(params.clone(), &prep.bundle, &prep.spec, &prep.vocab, &cfg, None).unwrap();
    assert!(same(&out, &params));
    assert!(report.records.is_empty());

    let (out, _) = finetune(params.clone(), &[], &prep.vocab, &TrainConfig::default(), None).unwrap();
    assert!(same(&out, &params));
}

#[test]
fn backtranslation_yields_one_pair_per_line() {
    let prep = small();
    let params = ModelParams::<f32>::init(tiny(prep.vocab.len()), 8).unwrap();
    let pairs = one_time_backtranslation_pairs(&params, &prep.vocab, &prep.bundle.mono_src).unwrap();
    assert_eq!(pairs.len(), prep.bundle.mono_src.len());
    for (synthetic, original) in &pairs {
        assert_eq!(synthetic.lang, LanguageId::Tgt);
        assert_eq!(original.lang, LanguageId::Src);
        assert!(!synthetic.ids.is_empty());
        assert!(synthetic.ids.len() <= 24);
    }
}

#[test]
fn untrained_model_fails_the_round_trip() {
    let prep = small();
    let params = ModelParams::<f32>::init(ModelConfig::desk(prep.vocab.len()), 9).unwrap();
    let t = ModelTranslator { params: &params, vocab: &prep.vocab, beam: 1 };
    let r = round_trip_validate(&t, &prep.bundle.validation_mono_src, &prep.spec).unwrap();
    assert!(r.bleu.bleu < 5.0, "{}", r.bleu.bleu);
}
