//! End-to-end runs on a synthetic bundle: the adaptation comparison, the
//! fine-tuning comparison and the feature-overlap comparison.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::analysis::{collect_features, feature_overlap_report, AnalysisError, EmbeddingCloud};
use crate::corpus::{default_cipher, generate_bundle, CipherSpec, CorpusBundle, CorpusError, CorpusSizes};
use crate::eval::{evaluate_testset, ModelTranslator};
use crate::model::{ModelConfig, ModelParams};
use crate::noise::NoiseKind;
use crate::tokenizer::{TokenizerError, Vocabulary};
use crate::training::{
    finetune, one_time_backtranslate_train, pretrain_supervised, train_adapt, DynLog, Objective,
    TrainConfig, TrainError, TrainReport,
};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Architecture without the vocabulary size, which comes from the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelConfig::desk(1);
        ModelShape {
            d_model: d.d_model,
            n_heads: d.n_heads,
            n_enc_layers: d.n_enc_layers,
            n_dec_layers: d.n_dec_layers,
            d_ff: d.d_ff,
            max_len: d.max_len,
            dropout: d.dropout,
        }
    }
}

impl ModelShape {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            d_ff: self.d_ff,
            max_len: self.max_len,
            vocab_size,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub sizes: CorpusSizes,
    pub model: ModelShape,
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
    pub finetune: TrainConfig,
    /// Beam width for test-set scoring.
    pub test_beam: usize,
    /// Token features per language for the overlap comparison.
    pub overlap_sample: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk(1)
    }
}

impl ExperimentConfig {
    /// The default desk-scale run for `seed`.
    pub fn desk(seed: u64) -> Self {
        let pretrain = TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            eval_interval_updates: 250,
            max_updates: 3_000,
            seed,
            ..TrainConfig::default()
        };
        let adapt = TrainConfig {
            lr: 3e-4,
            batch_size: 16,
            eval_interval_updates: 500,
            max_updates: 8_000,
            seed: seed.wrapping_add(1),
            ..TrainConfig::default()
        };
        let finetune = TrainConfig {
            lr: 3e-4,
            batch_size: 16,
            eval_interval_updates: 25,
            max_updates: 400,
            seed: seed.wrapping_add(2),
            ..TrainConfig::default()
        };
        ExperimentConfig {
            seed,
            sizes: CorpusSizes::default(),
            model: ModelShape::default(),
            pretrain,
            adapt,
            finetune,
            test_beam: 3,
            overlap_sample: 1_000,
        }
    }

    /// Every stage at a size that finishes in about half a minute. Far too
    /// small for the reported trends; meant for smoke runs.
    pub fn quick(seed: u64) -> Self {
        let mut cfg = Self::desk(seed);
        cfg.sizes = CorpusSizes {
            pretrain_parallel: 1_000,
            mono_src: 2_000,
            mono_tgt: 2_000,
            validation_mono_src: 100,
            test_parallel: 200,
            finetune_parallel: 100,
        };
        cfg.pretrain.max_updates = 300;
        cfg.pretrain.eval_interval_updates = 100;
        cfg.adapt.max_updates = 240;
        cfg.adapt.eval_interval_updates = 80;
        cfg.finetune.max_updates = 50;
        cfg.overlap_sample = 200;
        cfg
    }
}

/// Corpus, cipher and vocabulary of one run.
pub struct Prepared {
    pub spec: CipherSpec,
    pub bundle: CorpusBundle,
    pub vocab: Vocabulary,
}

pub fn prepare(seed: u64, sizes: &CorpusSizes) -> Result<Prepared> {
    let spec = default_cipher(seed);
    let bundle = generate_bundle(seed, sizes, &spec)?;
    let vocab = Vocabulary::build(&bundle.training_lines())?;
    Ok(Prepared { spec, bundle, vocab })
}

/// One adaptation strategy compared in the adaptation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptVariant {
    Baseline,
    OneTimeBacktranslation,
    CrossLT,
    CrossLTDenoiseDropChar,
    CrossLTAdv,
}

impl AdaptVariant {
    pub const ALL: [AdaptVariant; 5] = [
        AdaptVariant::Baseline,
        AdaptVariant::OneTimeBacktranslation,
        AdaptVariant::CrossLT,
        AdaptVariant::CrossLTDenoiseDropChar,
        AdaptVariant::CrossLTAdv,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AdaptVariant::Baseline => "pretrained baseline",
            AdaptVariant::OneTimeBacktranslation => "one-time back-translation",
            AdaptVariant::CrossLT => "CrossLT",
            AdaptVariant::CrossLTDenoiseDropChar => "CrossLT + DenoiseAE(DropChar)",
            AdaptVariant::CrossLTAdv => "CrossLT + Adv",
        }
    }

    /// Objectives and noise for the iterative variants.
    pub fn objectives(self) -> Option<(BTreeSet<Objective>, BTreeSet<NoiseKind>)> {
        let set = |o: &[Objective]| o.iter().copied().collect::<BTreeSet<_>>();
        match self {
            AdaptVariant::Baseline | AdaptVariant::OneTimeBacktranslation => None,
            AdaptVariant::CrossLT => Some((set(&[Objective::CrossLT]), NoiseKind::ALL.into_iter().collect())),
            AdaptVariant::CrossLTDenoiseDropChar => Some((
                set(&[Objective::DenoiseAE, Objective::CrossLT]),
                [NoiseKind::DropChar].into_iter().collect(),
            )),
            AdaptVariant::CrossLTAdv => Some((
                set(&[Objective::CrossLT, Objective::Adv]),
                NoiseKind::ALL.into_iter().collect(),
            )),
        }
    }
}

pub fn pretrain(prep: &Prepared, cfg: &ExperimentConfig, log: DynLog<'_>) -> Result<(ModelParams<f32>, TrainReport)> {
    let model_cfg = cfg.model.with_vocab(prep.vocab.len());
    Ok(pretrain_supervised(
        model_cfg,
        &prep.bundle.pretrain_parallel,
        &prep.vocab,
        &cfg.pretrain,
        log,
    )?)
}

/// Adapts a copy of `pretrained` with `variant`.
pub fn adapt(
    prep: &Prepared,
    pretrained: &ModelParams<f32>,
    variant: AdaptVariant,
    cfg: &ExperimentConfig,
    log: DynLog<'_>,
) -> Result<(ModelParams<f32>, TrainReport)> {
    match variant {
        AdaptVariant::Baseline => Ok((pretrained.clone(), TrainReport::default())),
        AdaptVariant::OneTimeBacktranslation => {
            let (p, r, _) = one_time_backtranslate_train(pretrained, &prep.bundle, &prep.spec, &prep.vocab, &cfg.adapt, log)?;
            Ok((p, r))
        }
        v => {
            let (objectives, noise) = v.objectives().expect("iterative variant");
            let tc = TrainConfig {
                enabled_objectives: objectives,
                enabled_noise: noise,
                ..cfg.adapt.clone()
            };
            Ok(train_adapt(pretrained.clone(), &prep.bundle, &prep.spec, &prep.vocab, &tc, log)?)
        }
    }
}

/// Target → source BLEU on the in-domain test split.
pub fn test_bleu(prep: &Prepared, params: &ModelParams<f32>, beam: usize) -> Result<f64> {
    let tr = ModelTranslator {
        params,
        vocab: &prep.vocab,
        beam,
    };
    Ok(evaluate_testset(&tr, &prep.bundle.test_parallel)?.bleu)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: AdaptVariant,
    pub test_bleu: f64,
    pub report: TrainReport,
}

/// Fine-tunes `adapted` on the first `n` labeled pairs and scores it.
pub fn finetune_on(
    prep: &Prepared,
    adapted: &ModelParams<f32>,
    n: usize,
    cfg: &ExperimentConfig,
    log: DynLog<'_>,
) -> Result<(ModelParams<f32>, f64)> {
    let n = n.min(prep.bundle.finetune_parallel.len());
    let (p, _) = finetune(adapted.clone(), &prep.bundle.finetune_parallel[..n], &prep.vocab, &cfg.finetune, log)?;
    let b = test_bleu(prep, &p, cfg.test_beam)?;
    Ok((p, b))
}

/// Overlap statistic of the encoder features of a fixed query sample:
/// in-domain source queries and their target-side counterparts.
pub fn overlap(prep: &Prepared, params: &ModelParams<f32>, cfg: &ExperimentConfig) -> Result<(f64, EmbeddingCloud)> {
    let tgt: Vec<String> = prep.bundle.test_parallel.iter().map(|(t, _)| t.clone()).collect();
    let src: Vec<String> = prep.bundle.test_parallel.iter().map(|(_, s)| s.clone()).collect();
    let mut cloud = collect_features(params, &prep.vocab, &src, &tgt, cfg.overlap_sample, cfg.seed)?;
    cloud.project()?;
    let stat = feature_overlap_report(&cloud)?;
    Ok((stat, cloud))
}

/// Everything measured by [`run_pipeline`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub pretrain: TrainReport,
    pub variants: Vec<VariantResult>,
    /// `(labeled pairs, test BLEU)`, fine-tuned from the model of `finetune_from`.
    pub finetune: Vec<(usize, f64)>,
    pub finetune_from: AdaptVariant,
    pub overlap_baseline: f64,
    pub overlap_adapted: f64,
}

impl PipelineResult {
    pub fn bleu(&self, v: AdaptVariant) -> Option<f64> {
        self.variants.iter().find(|r| r.variant == v).map(|r| r.test_bleu)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub variants: Vec<AdaptVariant>,
    pub finetune_sizes: Vec<usize>,
    /// Adapted model used for fine-tuning and the overlap comparison; must be
    /// listed in `variants`.
    pub finetune_from: AdaptVariant,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            variants: AdaptVariant::ALL.to_vec(),
            finetune_sizes: vec![100, 500],
            finetune_from: AdaptVariant::CrossLTDenoiseDropChar,
        }
    }
}

/// Corpus generation, pretraining, every requested adaptation variant,
/// fine-tuning and the overlap comparison, in that order. All training
/// records go to `log`.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    opts: &PipelineOptions,
    mut log: DynLog<'_>,
) -> Result<(Prepared, PipelineResult)> {
    let prep = prepare(cfg.seed, &cfg.sizes)?;
    let (pretrained, pretrain_report) = pretrain(&prep, cfg, log.as_deref_mut())?;
    let mut variants = Vec::new();
    let mut base_for_ft = None;
    for &v in &opts.variants {
        let (params, report) = adapt(&prep, &pretrained, v, cfg, log.as_deref_mut())?;
        let test_bleu = test_bleu(&prep, &params, cfg.test_beam)?;
        log::info!("{}: test BLEU {test_bleu:.2}", v.label());
        variants.push(VariantResult {
            variant: v,
            test_bleu,
            report,
        });
        if v == opts.finetune_from {
            base_for_ft = Some(params);
        }
    }
    let adapted = match base_for_ft {
        Some(p) => p,
        None => adapt(&prep, &pretrained, opts.finetune_from, cfg, log.as_deref_mut())?.0,
    };
    let mut finetune = Vec::new();
    for &n in &opts.finetune_sizes {
        let (_, b) = finetune_on(&prep, &adapted, n, cfg, log.as_deref_mut())?;
        log::info!("fine-tuned on {n} pairs: test BLEU {b:.2}");
        finetune.push((n, b));
    }
    let (overlap_baseline, _) = overlap(&prep, &pretrained, cfg)?;
    let (overlap_adapted, _) = overlap(&prep, &adapted, cfg)?;
    let result = PipelineResult {
        pretrain: pretrain_report,
        variants,
        finetune,
        finetune_from: opts.finetune_from,
        overlap_baseline,
        overlap_adapted,
    };
    Ok((prep, result))
}
