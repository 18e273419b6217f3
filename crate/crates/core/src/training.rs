//! Losses, optimizer, the adaptation objectives and the training schedules.
//!
//! All gradient work happens per sequence on independent tapes; per-item
//! gradients are summed in batch order, so results do not depend on how many
//! worker threads rayon uses.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CipherSpec, CorpusBundle, LanguageId};
use crate::eval::{early_stop_check, round_trip_validate, ModelTranslator, StopDecision};
use crate::model::{
    default_max_new, frame_source, frame_target, greedy_decode, Logits, ModelConfig, ModelError,
    ModelParams,
};
use crate::noise::{sample_noise_kind, NoiseKind};
use crate::tensor::{accumulate, smoothed_ce_row, Graph, Grads, Mat, Scalar};
use crate::tokenizer::{TokenId, TokenSequence, Vocabulary, UNK};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("all target positions are padding")]
    AllPad,
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite {what} loss at update {update}")]
    Diverged {
        what: &'static str,
        update: usize,
        report: Box<TrainReport>,
    },
    #[error("metrics log: {0}")]
    Log(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[serde(rename = "denoise")]
    DenoiseAE,
    #[serde(rename = "crosslt")]
    CrossLT,
    Adv,
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "denoise" | "denoiseae" => Ok(Objective::DenoiseAE),
            "crosslt" => Ok(Objective::CrossLT),
            "adv" => Ok(Objective::Adv),
            other => Err(format!("unknown objective `{other}`")),
        }
    }
}

/// Hyperparameters of one training phase. Every field has a default so a
/// config file only needs the values it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub eval_interval_updates: usize,
    pub patience: usize,
    pub enabled_objectives: BTreeSet<Objective>,
    pub enabled_noise: BTreeSet<NoiseKind>,
    pub beam: usize,
    pub adv_disc_lr: f64,
    pub adv_soft_label_high: f64,
    pub adv_soft_label_low: f64,
    pub adv_disc_hidden: usize,
    pub seed: u64,
    pub max_updates: usize,
    /// Global gradient-norm clip for model updates; 0 disables.
    pub clip_norm: f64,
    /// Validation lines used per evaluation (0 = all).
    pub validation_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            batch_size: 16,
            label_smoothing: 0.1,
            eval_interval_updates: 500,
            patience: 3,
            enabled_objectives: [Objective::CrossLT].into_iter().collect(),
            enabled_noise: NoiseKind::ALL.into_iter().collect(),
            beam: 3,
            adv_disc_lr: 1e-4,
            adv_soft_label_high: 0.9,
            adv_soft_label_low: 0.1,
            adv_disc_hidden: 64,
            seed: 1,
            max_updates: 20_000,
            clip_norm: 1.0,
            validation_limit: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if self.beam == 0 {
            return bad("beam must be at least 1");
        }
        if self.eval_interval_updates == 0 {
            return bad("eval_interval_updates must be at least 1");
        }
        if (self.adv_soft_label_high + self.adv_soft_label_low - 1.0).abs() > 1e-9 {
            return bad("soft labels must sum to 1");
        }
        if self.enabled_objectives.contains(&Objective::DenoiseAE) && self.enabled_noise.is_empty() {
            return bad("denoising needs at least one noise kind");
        }
        if self.lr < 0.0 || self.adv_disc_lr < 0.0 {
            return bad("learning rates must be non-negative");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with per-tensor moments. Tensors without a gradient in a step are
/// left untouched, moments included.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Option<Vec<f32>>>,
    v: Vec<Option<Vec<f32>>>,
    t: Vec<u64>,
    pub steps: u64,
}

impl Adam {
    pub fn new(num_tensors: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![None; num_tensors],
            v: vec![None; num_tensors],
            t: vec![0; num_tensors],
            steps: 0,
        }
    }

    /// Applies one update; `clip > 0` rescales gradients to that global norm.
    pub fn step(&mut self, params: &mut [Mat<f32>], grads: &Grads<f32>, clip: f64) {
        self.steps += 1;
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data.iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &mut params[i];
            let m = self.m[i].get_or_insert_with(|| vec![0.0; g.data.len()]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; g.data.len()]);
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let (b1, b2) = (self.beta1, self.beta2);
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let step = self.lr * c2.sqrt() / c1;
            let eps = self.eps * c2.sqrt();
            for ((w, &gr), (mm, vv)) in p.data.iter_mut().zip(&g.data).zip(m.iter_mut().zip(v.iter_mut())) {
                let gr = (gr as f64 * scale) as f32;
                *mm = (b1 as f32) * *mm + (1.0 - b1 as f32) * gr;
                *vv = (b2 as f32) * *vv + (1.0 - b2 as f32) * gr * gr;
                *w -= (step as f32) * *mm / (vv.sqrt() + eps as f32);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Losses

/// Mean label-smoothed cross entropy over non-PAD target positions, with the
/// gradient with respect to every logit (zero at PAD positions).
pub fn label_smoothed_ce<F: Scalar>(
    logits: &Logits<F>,
    targets: &[Vec<TokenId>],
    smoothing: F,
    pad_id: TokenId,
) -> Result<(F, Vec<F>)> {
    let mut grad = vec![F::zero(); logits.data.len()];
    let mut total = F::zero();
    let mut count = 0usize;
    for (b, row) in targets.iter().enumerate() {
        for (t, &gold) in row.iter().enumerate() {
            if gold == pad_id {
                continue;
            }
            let off = (b * logits.len + t) * logits.vocab;
            total += smoothed_ce_row(
                logits.at(b, t),
                gold as usize,
                smoothing,
                &mut grad[off..off + logits.vocab],
            );
            count += 1;
        }
    }
    if count == 0 {
        return Err(TrainError::AllPad);
    }
    let n = F::from_usize(count).unwrap();
    for g in &mut grad {
        *g = *g / n;
    }
    Ok((total / n, grad))
}

/// One teacher-forcing example: encoder input, decoder input, decoder target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<TokenId>,
    pub tgt_in: Vec<TokenId>,
    pub tgt_out: Vec<TokenId>,
}

impl Example {
    /// `source` read by the encoder, `target` reproduced by the decoder.
    pub fn new(source: &TokenSequence, target: &TokenSequence) -> Self {
        let (tgt_in, tgt_out) = frame_target(target);
        Example {
            src: frame_source(source),
            tgt_in,
            tgt_out,
        }
    }
}

fn item_rng(step_seed: u64, i: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(step_seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Mean loss over all target tokens of the batch and its gradient.
/// `dropout_seed = None` runs in evaluation mode.
pub fn supervised_grads<F: Scalar>(
    params: &ModelParams<F>,
    batch: &[Example],
    smoothing: f64,
    dropout_seed: Option<u64>,
) -> Result<(f64, Grads<F>)> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let count: usize = batch.iter().map(|e| e.tgt_out.len()).sum();
    if count == 0 {
        return Err(TrainError::AllPad);
    }
    let seed_scale = F::one() / F::from_usize(count).unwrap();
    let smoothing = F::lit(smoothing);
    let per_item: Vec<Result<(F, Grads<F>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut g = Graph::new(&[&params.tensors]);
            let mut rng = dropout_seed.map(|s| item_rng(s, i));
            let logits = params.logits_graph(&mut g, &ex.src, &ex.tgt_in, rng.as_mut())?;
            let loss = g.smoothed_ce(logits, &ex.tgt_out, smoothing);
            let grads = g.backward(loss, seed_scale).remove(0);
            Ok((g.scalar(loss), grads))
        })
        .collect();
    let mut total = F::zero();
    let mut grads: Grads<F> = vec![None; params.tensors.len()];
    for r in per_item {
        let (l, g) = r?;
        total += l;
        accumulate(&mut grads, g);
    }
    let mean = total.to_f64().unwrap() / count as f64;
    Ok((mean, grads))
}

/// Mean loss only, evaluation mode.
pub fn supervised_loss(params: &ModelParams<f32>, data: &[Example], smoothing: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in data.chunks(64) {
        let n: usize = chunk.iter().map(|e| e.tgt_out.len()).sum();
        let losses: Vec<Result<f64>> = chunk
            .par_iter()
            .map(|ex| {
                let mut g = Graph::new(&[&params.tensors]);
                let logits = params.logits_graph(&mut g, &ex.src, &ex.tgt_in, None)?;
                let loss = g.smoothed_ce(logits, &ex.tgt_out, smoothing as f32);
                Ok(g.scalar(loss) as f64)
            })
            .collect();
        for l in losses {
            total += l?;
        }
        count += n;
    }
    if count == 0 {
        return Err(TrainError::AllPad);
    }
    Ok(total / count as f64)
}

/// Shared state of a model being trained.
pub struct Trainer {
    pub params: ModelParams<f32>,
    pub opt: Adam,
    pub smoothing: f64,
    pub clip: f64,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(params: ModelParams<f32>, lr: f64, smoothing: f64, clip: f64, seed: u64) -> Self {
        let n = params.tensors.len();
        Trainer {
            params,
            opt: Adam::new(n, lr),
            smoothing,
            clip,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// One optimizer step on a supervised batch; returns the mean loss.
    pub fn supervised_step(&mut self, batch: &[Example]) -> Result<f64> {
        let seed = self.rng.gen();
        let (loss, grads) = supervised_grads(&self.params, batch, self.smoothing, Some(seed))?;
        if loss.is_finite() {
            self.opt.step(&mut self.params.tensors, &grads, self.clip);
        }
        Ok(loss)
    }
}

fn encode_all(vocab: &Vocabulary, lines: &[String], lang: LanguageId) -> Result<Vec<TokenSequence>> {
    lines
        .iter()
        .map(|l| vocab.encode(l, lang).map_err(TrainError::from))
        .collect()
}

fn truncate(seq: &mut TokenSequence, max_len: usize) {
    // room for EOS on the encoder side and the language tag on the decoder side
    seq.ids.truncate(max_len.saturating_sub(1));
}

/// Denoising auto-encoder update: corrupt each line, reconstruct the
/// original in the same language.
pub fn denoise_step(
    trainer: &mut Trainer,
    vocab: &Vocabulary,
    lines: &[String],
    lang: LanguageId,
    noise: NoiseKind,
) -> Result<f64> {
    if lines.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let max_len = trainer.params.config.max_len;
    let mut batch = Vec::with_capacity(lines.len());
    for line in lines {
        let noisy = noise.apply(line, trainer.rng());
        let mut input = vocab.encode(&noisy, lang)?;
        let mut target = vocab.encode(line, lang)?;
        truncate(&mut input, max_len);
        truncate(&mut target, max_len);
        batch.push(Example::new(&input, &target));
    }
    trainer.supervised_step(&batch)
}

/// Stage one of cross-language training: greedy translation of each line
/// into the other language with the current model. Pure inference; nothing
/// here is on a gradient tape. Empty outputs become a single UNK.
pub fn back_translate(
    params: &ModelParams<f32>,
    originals: &[TokenSequence],
) -> Result<Vec<TokenSequence>> {
    originals
        .par_iter()
        .map(|orig| {
            let to = orig.lang.other();
            let mut out = greedy_decode(params, orig, to, default_max_new(orig.ids.len()))?;
            if out.ids.is_empty() {
                out.ids.push(UNK);
            }
            truncate(&mut out, params.config.max_len);
            Ok(out)
        })
        .collect()
}

/// Cross-language update: back-translate the batch with the model itself,
/// then teacher-force the original from the synthetic translation.
pub fn crosslt_step(
    trainer: &mut Trainer,
    vocab: &Vocabulary,
    lines: &[String],
    lang: LanguageId,
) -> Result<f64> {
    if lines.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut originals = encode_all(vocab, lines, lang)?;
    for o in &mut originals {
        truncate(o, trainer.params.config.max_len);
    }
    let synthetic = back_translate(&trainer.params, &originals)?;
    let batch: Vec<Example> = synthetic
        .iter()
        .zip(&originals)
        .map(|(s, o)| Example::new(s, o))
        .collect();
    trainer.supervised_step(&batch)
}

// ---------------------------------------------------------------------------
// Adversarial alignment

/// Two dense layers, `d_model -> hidden -> 1`, with a ReLU between. The output
/// is the logit of "this token feature comes from the target language".
pub struct Discriminator {
    pub tensors: Vec<Mat<f32>>,
    pub opt: Adam,
}

impl Discriminator {
    pub fn new(d_model: usize, hidden: usize, lr: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD15C);
        let mut normal = |r: usize, c: usize, std: f64| {
            let n = Normal::new(0.0, std).unwrap();
            Mat::from_vec(r, c, (0..r * c).map(|_| n.sample(&mut rng) as f32).collect())
        };
        let tensors = vec![
            normal(d_model, hidden, (d_model as f64).powf(-0.5)),
            Mat::zeros(1, hidden),
            // small output layer: starts out at chance
            normal(hidden, 1, 1e-3),
            Mat::zeros(1, 1),
        ];
        Discriminator {
            opt: Adam::new(tensors.len(), lr),
            tensors,
        }
    }

    pub fn logits(&self, features: &Mat<f32>) -> Mat<f32> {
        let mut g = Graph::new(&[&self.tensors]);
        let x = g.input(features.clone());
        let out = disc_forward(&mut g, 0, x);
        g.value(out).clone()
    }
}

fn disc_forward(g: &mut Graph<f32>, set: usize, x: crate::tensor::Var) -> crate::tensor::Var {
    let (w1, b1, w2, b2) = (g.param(set, 0), g.param(set, 1), g.param(set, 2), g.param(set, 3));
    let h = g.linear(x, w1, b1);
    let h = g.relu(h);
    g.linear(h, w2, b2)
}

fn stack_rows(mats: &[Mat<f32>]) -> Mat<f32> {
    let cols = mats.first().map(|m| m.cols).unwrap_or(0);
    let rows = mats.iter().map(|m| m.rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for m in mats {
        data.extend_from_slice(&m.data);
    }
    Mat::from_vec(rows, cols, data)
}

/// Discriminator loss (mean binary cross entropy over token features) for
/// both batches with soft targets; encoder values are treated as constants.
pub fn discriminator_loss(
    disc: &Discriminator,
    src_features: &Mat<f32>,
    tgt_features: &Mat<f32>,
    high: f64,
    low: f64,
) -> (f64, Grads<f32>) {
    let mut g = Graph::new(&[&disc.tensors]);
    let xs = g.input(src_features.clone());
    let xt = g.input(tgt_features.clone());
    let ls = disc_forward(&mut g, 0, xs);
    let lt = disc_forward(&mut g, 0, xt);
    let bs = g.bce_with_logits(ls, low as f32);
    let bt = g.bce_with_logits(lt, high as f32);
    let total = g.add_scalars(&[bs, bt]);
    let n = (src_features.rows + tgt_features.rows).max(1) as f32;
    let grads = g.backward(total, 1.0 / n).remove(0);
    (g.scalar(total) as f64 / n as f64, grads)
}

/// One adversarial round: a discriminator update on detached encoder
/// features of both languages, then a generator update that pushes source
/// features toward the target label through the encoder with the
/// discriminator frozen. Returns `(disc_loss, gen_loss)`.
pub fn adversarial_step(
    trainer: &mut Trainer,
    disc: &mut Discriminator,
    vocab: &Vocabulary,
    src_lines: &[String],
    tgt_lines: &[String],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    if src_lines.is_empty() || tgt_lines.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let max_len = trainer.params.config.max_len;
    let frame = |lines: &[String], lang| -> Result<Vec<Vec<TokenId>>> {
        let mut seqs = encode_all(vocab, lines, lang)?;
        for s in &mut seqs {
            truncate(s, max_len);
        }
        Ok(seqs.iter().map(frame_source).collect())
    };
    let src_rows = frame(src_lines, LanguageId::Src)?;
    let tgt_rows = frame(tgt_lines, LanguageId::Tgt)?;

    // (a) discriminator, encoder gradients off
    let params = &trainer.params;
    let enc = |rows: &Vec<Vec<TokenId>>| -> Result<Mat<f32>> {
        let mats: Vec<Result<Mat<f32>>> = rows
            .par_iter()
            .map(|r| params.encode_eval(r).map_err(TrainError::from))
            .collect();
        Ok(stack_rows(&mats.into_iter().collect::<Result<Vec<_>>>()?))
    };
    let fs = enc(&src_rows)?;
    let ft = enc(&tgt_rows)?;
    let (disc_loss, dgrads) =
        discriminator_loss(disc, &fs, &ft, cfg.adv_soft_label_high, cfg.adv_soft_label_low);
    if disc_loss.is_finite() {
        disc.opt.step(&mut disc.tensors, &dgrads, 0.0);
    }

    // (b) generator: source features labelled as target
    let n_tokens: usize = src_rows.iter().map(Vec::len).sum();
    let seed_scale = 1.0 / n_tokens as f32;
    let high = cfg.adv_soft_label_high as f32;
    let disc_tensors = &disc.tensors;
    let per_item: Vec<Result<(f32, Grads<f32>)>> = src_rows
        .par_iter()
        .map(|row| {
            let mut g = Graph::new(&[&params.tensors, disc_tensors]);
            g.freeze(1);
            let feats = params.encode_graph(&mut g, row, None)?;
            let logits = disc_forward(&mut g, 1, feats);
            let loss = g.bce_with_logits(logits, high);
            let grads = g.backward(loss, seed_scale).remove(0);
            Ok((g.scalar(loss), grads))
        })
        .collect();
    let mut gen_total = 0.0f64;
    let mut grads: Grads<f32> = vec![None; params.tensors.len()];
    for r in per_item {
        let (l, g) = r?;
        gen_total += l as f64;
        accumulate(&mut grads, g);
    }
    let gen_loss = gen_total / n_tokens as f64;
    if gen_loss.is_finite() {
        trainer.opt.step(&mut trainer.params.tensors, &grads, trainer.clip);
    }
    Ok((disc_loss, gen_loss))
}

// ---------------------------------------------------------------------------
// Reports and logging

/// One evaluation checkpoint. Losses are means since the previous record;
/// `None` when the objective did not run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub phase: String,
    pub update_count: usize,
    pub denoise_loss: Option<f64>,
    pub crosslt_loss: Option<f64>,
    pub disc_loss: Option<f64>,
    pub gen_loss: Option<f64>,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_bleu: Option<f64>,
    pub intermediate_target_fraction: Option<f64>,
}

impl EvalRecord {
    fn new(phase: &str, update_count: usize) -> Self {
        EvalRecord {
            phase: phase.to_string(),
            update_count,
            denoise_loss: None,
            crosslt_loss: None,
            disc_loss: None,
            gen_loss: None,
            train_loss: None,
            val_loss: None,
            val_bleu: None,
            intermediate_target_fraction: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EvalRecord>,
    /// Update count of the returned (best) checkpoint.
    pub best_update: usize,
    pub stopped_early: bool,
}

/// JSON-lines sink; every record is flushed as it is written.
pub struct MetricsLog<W: Write> {
    out: W,
}

impl<W: Write> MetricsLog<W> {
    pub fn new(out: W) -> Self {
        MetricsLog { out }
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> std::io::Result<()> {
        let line = serde_json::to_string(record).map_err(std::io::Error::other)?;
        writeln!(self.out, "{line}")?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub type DynLog<'a> = Option<&'a mut MetricsLog<Box<dyn Write + Send>>>;

fn emit(log: &mut DynLog<'_>, rec: &EvalRecord) -> Result<()> {
    log::info!(
        "[{}] update {} bleu {:?} val_loss {:?} train {:?} denoise {:?} crosslt {:?} disc {:?} gen {:?}",
        rec.phase,
        rec.update_count,
        rec.val_bleu.map(|b| (b * 100.0).round() / 100.0),
        rec.val_loss,
        rec.train_loss,
        rec.denoise_loss,
        rec.crosslt_loss,
        rec.disc_loss,
        rec.gen_loss
    );
    if let Some(l) = log.as_deref_mut() {
        l.write(rec)?;
    }
    Ok(())
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn push(&mut self, x: f64) {
        self.sum += x;
        self.n += 1;
    }

    fn take(&mut self) -> Option<f64> {
        let out = (self.n > 0).then(|| self.sum / self.n as f64);
        *self = Mean::default();
        out
    }
}

/// Cycles through a shuffled index list, reshuffling at each pass.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Sampler { order, pos: 0 }
    }

    fn batch<T: Clone>(&mut self, data: &[T], size: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(data.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(data[self.order[self.pos]].clone());
            self.pos += 1;
        }
        out
    }
}

fn validation_slice(lines: &[String], limit: usize) -> &[String] {
    if limit == 0 || limit >= lines.len() {
        lines
    } else {
        &lines[..limit]
    }
}

fn check_finite(what: &'static str, loss: f64, update: usize, report: &TrainReport) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Diverged {
            what,
            update,
            report: Box::new(report.clone()),
        })
    }
}

/// Keeps the best-scoring parameters and applies the patience rule.
struct BestKeeper {
    history: Vec<f64>,
    best_score: f64,
    best_update: usize,
    best: Option<ModelParams<f32>>,
    patience: usize,
}

impl BestKeeper {
    fn new(patience: usize) -> Self {
        BestKeeper {
            history: Vec::new(),
            best_score: f64::NEG_INFINITY,
            best_update: 0,
            best: None,
            patience,
        }
    }

    /// Records a score (higher is better); returns true when training should stop.
    fn observe(&mut self, score: f64, update: usize, params: &ModelParams<f32>) -> bool {
        if score > self.best_score || self.best.is_none() {
            self.best_score = score;
            self.best_update = update;
            self.best = Some(params.clone());
        }
        self.history.push(score);
        early_stop_check(&self.history, self.patience) == StopDecision::Stop
    }
}

/// Unsupervised adaptation on the in-domain monolingual splits.
///
/// Each cycle runs the enabled objectives in order: denoising on a source
/// batch then a target batch (one sampled noise kind per batch),
/// cross-language training on a source batch then a target batch, then one
/// adversarial round. Every `eval_interval_updates` model updates the model
/// is scored by round-trip BLEU on the validation split; training stops on
/// the patience rule or at `max_updates`, returning the best checkpoint.
pub fn train_adapt(
    params: ModelParams<f32>,
    bundle: &CorpusBundle,
    spec: &CipherSpec,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    mut log: DynLog<'_>,
) -> Result<(ModelParams<f32>, TrainReport)> {
    cfg.validate()?;
    let mut report = TrainReport::default();
    if cfg.enabled_objectives.is_empty() {
        return Ok((params, report));
    }
    let noise: Vec<NoiseKind> = cfg.enabled_noise.iter().copied().collect();
    let validation = validation_slice(&bundle.validation_mono_src, cfg.validation_limit);
    let mut trainer = Trainer::new(params, cfg.lr, cfg.label_smoothing, cfg.clip_norm, cfg.seed);
    let mut disc = cfg.enabled_objectives.contains(&Objective::Adv).then(|| {
        Discriminator::new(
            trainer.params.config.d_model,
            cfg.adv_disc_hidden,
            cfg.adv_disc_lr,
            cfg.seed,
        )
    });
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(17));
    let mut src_sampler = Sampler::new(bundle.mono_src.len(), &mut batch_rng);
    let mut tgt_sampler = Sampler::new(bundle.mono_tgt.len(), &mut batch_rng);
    let mut keeper = BestKeeper::new(cfg.patience);
    let (mut dn, mut cl, mut dl, mut gl) = (Mean::default(), Mean::default(), Mean::default(), Mean::default());

    let mut evaluate = |trainer: &Trainer,
                        update: usize,
                        losses: [Option<f64>; 4],
                        report: &mut TrainReport,
                        log: &mut DynLog<'_>|
     -> Result<bool> {
        let tr = ModelTranslator {
            params: &trainer.params,
            vocab,
            beam: cfg.beam,
        };
        let rt = round_trip_validate(&tr, validation, spec)?;
        let mut rec = EvalRecord::new("adapt", update);
        [rec.denoise_loss, rec.crosslt_loss, rec.disc_loss, rec.gen_loss] = losses;
        rec.val_bleu = Some(rt.bleu.bleu);
        rec.intermediate_target_fraction = Some(rt.target_fraction);
        emit(log, &rec)?;
        report.records.push(rec);
        Ok(keeper.observe(rt.bleu.bleu, update, &trainer.params))
    };

    let mut update = 0usize;
    let mut stop = evaluate(&trainer, 0, [None; 4], &mut report, &mut log)?;
    'outer: while !stop && update < cfg.max_updates {
        for obj in cfg.enabled_objectives.iter().copied() {
            let mut steps: Vec<(LanguageId, Option<NoiseKind>)> = Vec::new();
            match obj {
                Objective::DenoiseAE | Objective::CrossLT => {
                    for lang in [LanguageId::Src, LanguageId::Tgt] {
                        let kind = if obj == Objective::DenoiseAE {
                            Some(sample_noise_kind(&noise, trainer.rng()).expect("validated non-empty"))
                        } else {
                            None
                        };
                        steps.push((lang, kind));
                    }
                }
                Objective::Adv => steps.push((LanguageId::Src, None)),
            }
            for (lang, kind) in steps {
                if update >= cfg.max_updates {
                    break 'outer;
                }
                match obj {
                    Objective::DenoiseAE | Objective::CrossLT => {
                        let lines = match lang {
                            LanguageId::Src => src_sampler.batch(&bundle.mono_src, cfg.batch_size, &mut batch_rng),
                            LanguageId::Tgt => tgt_sampler.batch(&bundle.mono_tgt, cfg.batch_size, &mut batch_rng),
                        };
                        if obj == Objective::DenoiseAE {
                            let l = denoise_step(&mut trainer, vocab, &lines, lang, kind.unwrap())?;
                            check_finite("denoise", l, update, &report)?;
                            dn.push(l);
                        } else {
                            let l = crosslt_step(&mut trainer, vocab, &lines, lang)?;
                            check_finite("crosslt", l, update, &report)?;
                            cl.push(l);
                        }
                    }
                    Objective::Adv => {
                        let s = src_sampler.batch(&bundle.mono_src, cfg.batch_size, &mut batch_rng);
                        let t = tgt_sampler.batch(&bundle.mono_tgt, cfg.batch_size, &mut batch_rng);
                        let d = disc.as_mut().expect("created when Adv is enabled");
                        let (a, b) = adversarial_step(&mut trainer, d, vocab, &s, &t, cfg)?;
                        check_finite("discriminator", a, update, &report)?;
                        check_finite("generator", b, update, &report)?;
                        dl.push(a);
                        gl.push(b);
                    }
                }
                update += 1;
                if update % cfg.eval_interval_updates == 0 {
                    let losses = [dn.take(), cl.take(), dl.take(), gl.take()];
                    stop = evaluate(&trainer, update, losses, &mut report, &mut log)?;
                    if stop {
                        break 'outer;
                    }
                }
            }
        }
    }
    if !stop && update % cfg.eval_interval_updates != 0 {
        let losses = [dn.take(), cl.take(), dl.take(), gl.take()];
        evaluate(&trainer, update, losses, &mut report, &mut log)?;
    }
    report.stopped_early = stop;
    report.best_update = keeper.best_update;
    let best = keeper.best.take().unwrap_or(trainer.params);
    Ok((best, report))
}

/// Generic supervised loop with periodic scoring (higher is better), best
/// checkpoint retention and the patience rule.
fn supervised_loop(
    phase: &str,
    params: ModelParams<f32>,
    train: &[Example],
    cfg: &TrainConfig,
    mut score: impl FnMut(&ModelParams<f32>) -> Result<(f64, EvalRecord)>,
    mut log: DynLog<'_>,
) -> Result<(ModelParams<f32>, TrainReport)> {
    cfg.validate()?;
    let mut report = TrainReport::default();
    if train.is_empty() || cfg.max_updates == 0 {
        return Ok((params, report));
    }
    let mut trainer = Trainer::new(params, cfg.lr, cfg.label_smoothing, cfg.clip_norm, cfg.seed);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(29));
    let mut sampler = Sampler::new(train.len(), &mut batch_rng);
    let mut keeper = BestKeeper::new(cfg.patience);
    let mut tl = Mean::default();
    let mut record = |trainer: &Trainer, update: usize, tl: &mut Mean, report: &mut TrainReport, log: &mut DynLog<'_>| -> Result<bool> {
        let (s, mut rec) = score(&trainer.params)?;
        rec.phase = phase.to_string();
        rec.update_count = update;
        rec.train_loss = tl.take();
        emit(log, &rec)?;
        report.records.push(rec);
        Ok(keeper.observe(s, update, &trainer.params))
    };
    let mut stop = record(&trainer, 0, &mut tl, &mut report, &mut log)?;
    let mut update = 0;
    while !stop && update < cfg.max_updates {
        let batch = sampler.batch(train, cfg.batch_size, &mut batch_rng);
        let l = trainer.supervised_step(&batch)?;
        check_finite(phase_name(phase), l, update, &report)?;
        tl.push(l);
        update += 1;
        if update % cfg.eval_interval_updates == 0 || update == cfg.max_updates {
            stop = record(&trainer, update, &mut tl, &mut report, &mut log)?;
        }
    }
    report.stopped_early = stop;
    report.best_update = keeper.best_update;
    let best = keeper.best.take().unwrap_or(trainer.params);
    Ok((best, report))
}

fn phase_name(phase: &str) -> &'static str {
    match phase {
        "pretrain" => "pretrain",
        "finetune" => "finetune",
        _ => "supervised",
    }
}

/// Teacher-forcing examples in both directions for `(src, tgt)` pairs.
pub fn bidirectional_examples(
    vocab: &Vocabulary,
    pairs: &[(String, String)],
    max_len: usize,
) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(2 * pairs.len());
    for (s, t) in pairs {
        let mut s = vocab.encode(s, LanguageId::Src)?;
        let mut t = vocab.encode(t, LanguageId::Tgt)?;
        truncate(&mut s, max_len);
        truncate(&mut t, max_len);
        out.push(Example::new(&s, &t));
        out.push(Example::new(&t, &s));
    }
    Ok(out)
}

/// Target → source examples for `(tgt, src)` pairs.
pub fn tgt_to_src_examples(
    vocab: &Vocabulary,
    pairs: &[(String, String)],
    max_len: usize,
) -> Result<Vec<Example>> {
    pairs
        .iter()
        .map(|(t, s)| {
            let mut t = vocab.encode(t, LanguageId::Tgt)?;
            let mut s = vocab.encode(s, LanguageId::Src)?;
            truncate(&mut t, max_len);
            truncate(&mut s, max_len);
            Ok(Example::new(&t, &s))
        })
        .collect()
}

/// Deterministic split of `n` items into `(train, validation)` index sets with
/// `frac` of them held out (at least one when `n >= 2`).
fn holdout(n: usize, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x4011));
    let k = if n >= 2 { ((n as f64 * frac).round() as usize).clamp(1, n - 1) } else { 0 };
    let val = idx[..k].to_vec();
    let train = idx[k..].to_vec();
    (train, val)
}

/// Supervised training from random initialization on out-of-domain parallel
/// data, both directions, early-stopped on held-out loss.
pub fn pretrain_supervised(
    model_cfg: ModelConfig,
    pairs: &[(String, String)],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    log: DynLog<'_>,
) -> Result<(ModelParams<f32>, TrainReport)> {
    let params = ModelParams::init(model_cfg, cfg.seed)?;
    let (train_idx, val_idx) = holdout(pairs.len(), 0.05, cfg.seed);
    let pick = |ix: &[usize]| ix.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>();
    let train = bidirectional_examples(vocab, &pick(&train_idx), model_cfg.max_len)?;
    let val = bidirectional_examples(vocab, &pick(&val_idx), model_cfg.max_len)?;
    let smoothing = cfg.label_smoothing;
    let score = |p: &ModelParams<f32>| -> Result<(f64, EvalRecord)> {
        let data = if val.is_empty() { &train } else { &val };
        let l = supervised_loss(p, data, smoothing)?;
        let mut rec = EvalRecord::new("pretrain", 0);
        rec.val_loss = Some(l);
        Ok((-l, rec))
    };
    supervised_loop("pretrain", params, &train, cfg, score, log)
}

/// Supervised target → source fine-tuning on labeled pairs with a 90/10
/// train/validation split; early-stopped on validation loss. An empty set
/// returns the input unchanged.
pub fn finetune(
    params: ModelParams<f32>,
    labeled: &[(String, String)],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    log: DynLog<'_>,
) -> Result<(ModelParams<f32>, TrainReport)> {
    if labeled.is_empty() {
        return Ok((params, TrainReport::default()));
    }
    let max_len = params.config.max_len;
    let (train_idx, val_idx) = holdout(labeled.len(), 0.10, cfg.seed);
    let pick = |ix: &[usize]| ix.iter().map(|&i| labeled[i].clone()).collect::<Vec<_>>();
    let train = tgt_to_src_examples(vocab, &pick(&train_idx), max_len)?;
    let val = tgt_to_src_examples(vocab, &pick(&val_idx), max_len)?;
    let smoothing = cfg.label_smoothing;
    let score = |p: &ModelParams<f32>| -> Result<(f64, EvalRecord)> {
        let data = if val.is_empty() { &train } else { &val };
        let l = supervised_loss(p, data, smoothing)?;
        let mut rec = EvalRecord::new("finetune", 0);
        rec.val_loss = Some(l);
        Ok((-l, rec))
    };
    supervised_loop("finetune", params, &train, cfg, score, log)
}

/// Translates `mono_src` once with the frozen model and returns the
/// `(synthetic target, original source)` token pairs.
pub fn one_time_backtranslation_pairs(
    params: &ModelParams<f32>,
    vocab: &Vocabulary,
    mono_src: &[String],
) -> Result<Vec<(TokenSequence, TokenSequence)>> {
    let mut originals = encode_all(vocab, mono_src, LanguageId::Src)?;
    for o in &mut originals {
        truncate(o, params.config.max_len);
    }
    let synthetic = back_translate(params, &originals)?;
    Ok(synthetic.into_iter().zip(originals).collect())
}

/// The non-iterative baseline: back-translate the source monolingual split
/// once, then train a copy of the pretrained model on the synthetic
/// target → source pairs. Early stopping uses the same round-trip BLEU as
/// adaptation.
pub fn one_time_backtranslate_train(
    pretrained: &ModelParams<f32>,
    bundle: &CorpusBundle,
    spec: &CipherSpec,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    log: DynLog<'_>,
) -> Result<(ModelParams<f32>, TrainReport, usize)> {
    let pairs = one_time_backtranslation_pairs(pretrained, vocab, &bundle.mono_src)?;
    let n = pairs.len();
    let train: Vec<Example> = pairs.iter().map(|(s, o)| Example::new(s, o)).collect();
    let validation = validation_slice(&bundle.validation_mono_src, cfg.validation_limit);
    let beam = cfg.beam;
    let score = |p: &ModelParams<f32>| -> Result<(f64, EvalRecord)> {
        let tr = ModelTranslator { params: p, vocab, beam };
        let rt = round_trip_validate(&tr, validation, spec)?;
        let mut rec = EvalRecord::new("one_time_bt", 0);
        rec.val_bleu = Some(rt.bleu.bleu);
        rec.intermediate_target_fraction = Some(rt.target_fraction);
        Ok((rt.bleu.bleu, rec))
    };
    let (p, r) = supervised_loop("one_time_bt", pretrained.clone(), &train, cfg, score, log)?;
    Ok((p, r, n))
}

// ---------------------------------------------------------------------------
// Gradient verification

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Finite-difference step for [`grad_check`].
pub const FD_STEP: f64 = 1e-3;
/// Denominator floor for the relative error of near-zero gradients.
pub const FD_FLOOR: f64 = 1e-6;

/// Fourth-order central finite differences against `analytic`, per tensor.
/// The relative error of an element is `|a - n| / max(|a|, |n|, FD_FLOOR)`.
pub fn grad_check(
    params: &ModelParams<f64>,
    tensors: &[usize],
    loss: impl Fn(&ModelParams<f64>) -> f64 + Sync,
    analytic: &Grads<f64>,
    tolerance: f64,
) -> Vec<GradCheckResult> {
    tensors
        .iter()
        .map(|&ti| {
            let len = params.tensors[ti].data.len();
            let errs: Vec<f64> = (0..len)
                .into_par_iter()
                .map(|e| {
                    let mut p = params.clone();
                    let x = p.tensors[ti].data[e];
                    let mut at = |k: f64| {
                        p.tensors[ti].data[e] = x + k * FD_STEP;
                        loss(&p)
                    };
                    let (m2, m1, p1, p2) = (at(-2.0), at(-1.0), at(1.0), at(2.0));
                    let num = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * FD_STEP);
                    let ana = analytic[ti].as_ref().map_or(0.0, |m| m.data[e]);
                    (ana - num).abs() / ana.abs().max(num.abs()).max(FD_FLOOR)
                })
                .collect();
            let (worst_index, max_rel_err) = errs
                .iter()
                .copied()
                .enumerate()
                .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
            GradCheckResult {
                name: params.layout.names[ti].clone(),
                max_rel_err,
                worst_index,
                passed: max_rel_err < tolerance,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_uniform_is_log_v() {
        let logits = Logits {
            batch: 1,
            len: 2,
            vocab: 4,
            data: vec![0.0f64; 8],
        };
        for s in [0.0, 0.1, 0.5] {
            let (l, _) = label_smoothed_ce(&logits, &[vec![2, 3]], s, 0).unwrap();
            assert!((l - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_hand_values() {
        let logits = Logits {
            batch: 1,
            len: 1,
            vocab: 3,
            data: vec![2f64.ln(), 0.0, 0.0],
        };
        let (l0, _) = label_smoothed_ce(&logits, &[vec![0]], 0.0, 99).unwrap();
        assert!((l0 - 2f64.ln()).abs() < 1e-12);
        let (l1, _) = label_smoothed_ce(&logits, &[vec![0]], 0.1, 99).unwrap();
        let want = -(0.9 * 0.5f64.ln() + 0.05 * 0.25f64.ln() + 0.05 * 0.25f64.ln());
        assert!((l1 - want).abs() < 1e-12);
        assert!((l1 - 0.7625).abs() < 1e-4);
    }

    #[test]
    fn ce_pad_positions_are_free() {
        let logits = Logits {
            batch: 1,
            len: 2,
            vocab: 3,
            data: vec![1.0f64, 2.0, 3.0, 7.0, -1.0, 0.5],
        };
        let (l, g) = label_smoothed_ce(&logits, &[vec![1, 0]], 0.1, 0).unwrap();
        let single = Logits {
            batch: 1,
            len: 1,
            vocab: 3,
            data: vec![1.0f64, 2.0, 3.0],
        };
        let (l1, _) = label_smoothed_ce(&single, &[vec![1]], 0.1, 0).unwrap();
        assert_eq!(l, l1);
        assert!(g[3..].iter().all(|&x| x == 0.0));
        assert!(matches!(
            label_smoothed_ce(&logits, &[vec![0, 0]], 0.1, 0),
            Err(TrainError::AllPad)
        ));
    }

    #[test]
    fn adam_zero_lr_is_identity_and_skips_missing() {
        let mut p = vec![Mat::from_vec(1, 2, vec![1.0f32, -2.0]), Mat::from_vec(1, 1, vec![3.0])];
        let before = p.clone();
        let g: Grads<f32> = vec![Some(Mat::from_vec(1, 2, vec![0.5, 0.5])), None];
        let mut opt = Adam::new(2, 0.0);
        opt.step(&mut p, &g, 1.0);
        assert_eq!(p, before);
        let mut opt = Adam::new(2, 0.1);
        opt.step(&mut p, &g, 0.0);
        assert_ne!(p[0], before[0]);
        assert_eq!(p[1], before[1]);
    }

    #[test]
    fn holdout_shapes() {
        let (t, v) = holdout(500, 0.1, 1);
        assert_eq!((t.len(), v.len()), (450, 50));
        let (t, v) = holdout(1, 0.1, 1);
        assert_eq!((t.len(), v.len()), (1, 0));
        let (t, v) = holdout(3, 0.1, 1);
        assert_eq!((t.len(), v.len()), (2, 1));
    }

    #[test]
    fn config_checks() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.adv_soft_label_low = 0.2;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            enabled_objectives: [Objective::DenoiseAE].into_iter().collect(),
            enabled_noise: BTreeSet::new(),
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn chance_discriminator_loss() {
        let disc = Discriminator::new(8, 16, 1e-3, 0);
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut feats = || Mat::from_vec(50, 8, (0..400).map(|_| n.sample(&mut rng) as f32).collect());
        let (l, _) = discriminator_loss(&disc, &feats(), &feats(), 0.9, 0.1);
        assert!((l - 2f64.ln()).abs() < 1e-2, "{l}");
    }
}
