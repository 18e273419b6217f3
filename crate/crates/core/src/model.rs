//! Small pre-layer-norm encoder-decoder transformer with a shared vocabulary,
//! tied input/output embeddings and language-forced decoding.
//!
//! Sequences are processed one at a time on their own tape, so padding never
//! reaches the attention kernels: batch helpers strip PAD before running the
//! network and re-pad the outputs.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LanguageId;
use crate::decode::{self, StepScorer};
use crate::tensor::{matmul, Graph, Mat, Scalar, Var};
use crate::tokenizer::{lang_token, TokenId, TokenSequence, EOS, PAD};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("decoder input must start with a language tag, found {0}")]
    MissingLangTag(TokenId),
    #[error("batch shapes disagree: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary size.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 128,
            max_len: 32,
            vocab_size,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0
            || self.n_heads == 0
            || self.n_enc_layers == 0
            || self.n_dec_layers == 0
            || self.d_ff == 0
            || self.max_len == 0
            || self.vocab_size == 0
        {
            return bad("all sizes must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, Copy)]
struct FfnIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormIdx {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncLayer {
    ln1: NormIdx,
    attn: AttnIdx,
    ln2: NormIdx,
    ffn: FfnIdx,
}

#[derive(Debug, Clone, Copy)]
struct DecLayer {
    ln1: NormIdx,
    self_attn: AttnIdx,
    ln2: NormIdx,
    cross_attn: AttnIdx,
    ln3: NormIdx,
    ffn: FfnIdx,
}

/// Tensor indices by role, plus names and shapes in storage order.
#[derive(Debug, Clone)]
pub struct Layout {
    embed: usize,
    pos: usize,
    enc: Vec<EncLayer>,
    enc_norm: NormIdx,
    dec: Vec<DecLayer>,
    dec_norm: NormIdx,
    pub names: Vec<String>,
    pub shapes: Vec<(usize, usize)>,
    /// Tensors that belong to the encoder side (used by adversarial updates).
    pub encoder_tensors: Vec<usize>,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut add = |name: String, r: usize, k: usize| {
            names.push(name);
            shapes.push((r, k));
            names.len() - 1
        };
        let d = c.d_model;
        let embed = add("embed".into(), c.vocab_size, d);
        let pos = add("pos".into(), c.max_len, d);
        let norm = |add: &mut dyn FnMut(String, usize, usize) -> usize, p: &str| NormIdx {
            g: add(format!("{p}.gamma"), 1, d),
            b: add(format!("{p}.beta"), 1, d),
        };
        let attn = |add: &mut dyn FnMut(String, usize, usize) -> usize, p: &str| AttnIdx {
            wq: add(format!("{p}.wq"), d, d),
            bq: add(format!("{p}.bq"), 1, d),
            wk: add(format!("{p}.wk"), d, d),
            bk: add(format!("{p}.bk"), 1, d),
            wv: add(format!("{p}.wv"), d, d),
            bv: add(format!("{p}.bv"), 1, d),
            wo: add(format!("{p}.wo"), d, d),
            bo: add(format!("{p}.bo"), 1, d),
        };
        let ffn = |add: &mut dyn FnMut(String, usize, usize) -> usize, p: &str| FfnIdx {
            w1: add(format!("{p}.w1"), d, c.d_ff),
            b1: add(format!("{p}.b1"), 1, c.d_ff),
            w2: add(format!("{p}.w2"), c.d_ff, d),
            b2: add(format!("{p}.b2"), 1, d),
        };
        let mut enc = Vec::new();
        for l in 0..c.n_enc_layers {
            let p = format!("enc.{l}");
            enc.push(EncLayer {
                ln1: norm(&mut add, &format!("{p}.ln1")),
                attn: attn(&mut add, &format!("{p}.attn")),
                ln2: norm(&mut add, &format!("{p}.ln2")),
                ffn: ffn(&mut add, &format!("{p}.ffn")),
            });
        }
        let enc_norm = norm(&mut add, "enc.norm");
        let enc_end = enc_norm.b + 1;
        let mut dec = Vec::new();
        for l in 0..c.n_dec_layers {
            let p = format!("dec.{l}");
            dec.push(DecLayer {
                ln1: norm(&mut add, &format!("{p}.ln1")),
                self_attn: attn(&mut add, &format!("{p}.self_attn")),
                ln2: norm(&mut add, &format!("{p}.ln2")),
                cross_attn: attn(&mut add, &format!("{p}.cross_attn")),
                ln3: norm(&mut add, &format!("{p}.ln3")),
                ffn: ffn(&mut add, &format!("{p}.ffn")),
            });
        }
        let dec_norm = norm(&mut add, "dec.norm");
        Layout {
            embed,
            pos,
            enc,
            enc_norm,
            dec,
            dec_norm,
            names,
            shapes,
            encoder_tensors: (0..enc_end).collect(),
        }
    }
}

/// All trainable tensors of one model.
#[derive(Debug, Clone)]
pub struct ModelParams<F: Scalar> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub tensors: Vec<Mat<F>>,
}

impl<F: Scalar> ModelParams<F> {
    /// Random initialization: embeddings and positions ~ N(0, d^-1/2),
    /// projections ~ N(0, fan_in^-1/2), residual outputs further scaled by
    /// `1/sqrt(2 * layers)`, norms at identity, biases at zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = (2 * (config.n_enc_layers + config.n_dec_layers)) as f64;
        let tensors = layout
            .names
            .iter()
            .zip(&layout.shapes)
            .map(|(name, &(r, c))| {
                let std = if name.ends_with(".gamma") {
                    return Mat::filled(r, c, F::one());
                } else if r == 1 {
                    return Mat::zeros(r, c);
                } else if name == "embed" || name == "pos" {
                    (config.d_model as f64).powf(-0.5)
                } else if name.ends_with(".wo") || name.ends_with(".w2") {
                    (r as f64).powf(-0.5) / depth.sqrt()
                } else {
                    (r as f64).powf(-0.5)
                };
                let normal = Normal::new(0.0, std).expect("finite std");
                Mat::from_vec(
                    r,
                    c,
                    (0..r * c).map(|_| F::lit(normal.sample(&mut rng))).collect(),
                )
            })
            .collect();
        Ok(ModelParams {
            config,
            layout,
            tensors,
        })
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layout.names.iter().position(|n| n == name)
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config,
            layout: self.layout.clone(),
            tensors: self.tensors.iter().map(Mat::cast).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Mat::is_finite)
    }
}

/// Per-sequence dropout state. `None` anywhere means evaluation mode.
pub struct Dropout<'r> {
    pub p: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply<F: Scalar>(&mut self, g: &mut Graph<F>, x: Var) -> Var {
        if self.p <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.p;
        let scale = F::lit(1.0 / keep);
        let n = g.value(x).data.len();
        let mask = (0..n)
            .map(|_| if self.rng.gen_bool(keep) { scale } else { F::zero() })
            .collect();
        g.mask_mul(x, mask)
    }
}

fn drop<F: Scalar>(g: &mut Graph<F>, x: Var, d: &mut Option<Dropout<'_>>) -> Var {
    match d {
        Some(d) => d.apply(g, x),
        None => x,
    }
}

impl<F: Scalar> ModelParams<F> {
    fn p(&self, g: &mut Graph<F>, idx: usize) -> Var {
        g.param(0, idx)
    }

    fn norm(&self, g: &mut Graph<F>, x: Var, n: NormIdx) -> Var {
        let gamma = self.p(g, n.g);
        let beta = self.p(g, n.b);
        g.layer_norm(x, gamma, beta)
    }

    fn attention(&self, g: &mut Graph<F>, xq: Var, xkv: Var, a: AttnIdx, causal: bool) -> Var {
        let d = self.config.d_model;
        let h = self.config.n_heads;
        let dh = d / h;
        let (wq, bq, wk, bk, wv, bv, wo, bo) = (
            self.p(g, a.wq),
            self.p(g, a.bq),
            self.p(g, a.wk),
            self.p(g, a.bk),
            self.p(g, a.wv),
            self.p(g, a.bv),
            self.p(g, a.wo),
            self.p(g, a.bo),
        );
        let q = g.linear(xq, wq, bq);
        let k = g.linear(xkv, wk, bk);
        let v = g.linear(xkv, wv, bv);
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let qh = g.slice_cols(q, i * dh, dh);
            let kh = g.slice_cols(k, i * dh, dh);
            let vh = g.slice_cols(v, i * dh, dh);
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, scale);
            let p = g.softmax(s, causal);
            heads.push(g.matmul(p, vh));
        }
        let o = if h == 1 { heads[0] } else { g.concat_cols(&heads) };
        g.linear(o, wo, bo)
    }

    fn ffn(&self, g: &mut Graph<F>, x: Var, f: FfnIdx) -> Var {
        let (w1, b1, w2, b2) = (self.p(g, f.w1), self.p(g, f.b1), self.p(g, f.w2), self.p(g, f.b2));
        let h = g.linear(x, w1, b1);
        let h = g.gelu(h);
        g.linear(h, w2, b2)
    }

    fn embed(&self, g: &mut Graph<F>, ids: &[TokenId], d: &mut Option<Dropout<'_>>) -> Result<Var> {
        if ids.len() > self.config.max_len {
            return Err(ModelError::TooLong {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::Shape(format!("token id {bad} outside vocabulary")));
        }
        let e = self.p(g, self.layout.embed);
        let pt = self.p(g, self.layout.pos);
        let tok = g.gather(e, ids);
        let positions: Vec<u32> = (0..ids.len() as u32).collect();
        let pos = g.gather(pt, &positions);
        let x = g.add(tok, pos);
        Ok(drop(g, x, d))
    }

    /// Encoder over one unpadded source row; returns `len x d_model`.
    pub fn encode_graph(
        &self,
        g: &mut Graph<F>,
        src: &[TokenId],
        mut d: Option<Dropout<'_>>,
    ) -> Result<Var> {
        let mut x = self.embed(g, src, &mut d)?;
        for l in &self.layout.enc {
            let h = self.norm(g, x, l.ln1);
            let h = self.attention(g, h, h, l.attn, false);
            let h = drop(g, h, &mut d);
            x = g.add(x, h);
            let h = self.norm(g, x, l.ln2);
            let h = self.ffn(g, h, l.ffn);
            let h = drop(g, h, &mut d);
            x = g.add(x, h);
        }
        Ok(self.norm(g, x, self.layout.enc_norm))
    }

    /// Decoder hidden states (`len x d_model`) for one unpadded target prefix.
    pub fn decode_hidden(
        &self,
        g: &mut Graph<F>,
        memory: Var,
        tgt_in: &[TokenId],
        mut d: Option<Dropout<'_>>,
    ) -> Result<Var> {
        let mut x = self.embed(g, tgt_in, &mut d)?;
        for l in &self.layout.dec {
            let h = self.norm(g, x, l.ln1);
            let h = self.attention(g, h, h, l.self_attn, true);
            let h = drop(g, h, &mut d);
            x = g.add(x, h);
            let h = self.norm(g, x, l.ln2);
            let h = self.attention(g, h, memory, l.cross_attn, false);
            let h = drop(g, h, &mut d);
            x = g.add(x, h);
            let h = self.norm(g, x, l.ln3);
            let h = self.ffn(g, h, l.ffn);
            let h = drop(g, h, &mut d);
            x = g.add(x, h);
        }
        Ok(self.norm(g, x, self.layout.dec_norm))
    }

    /// Logits (`len x vocab`) through the tied output projection.
    pub fn project(&self, g: &mut Graph<F>, hidden: Var) -> Var {
        let e = self.p(g, self.layout.embed);
        g.matmul_t(hidden, e)
    }

    /// Full teacher-forced pass for one pair of unpadded rows.
    pub fn logits_graph(
        &self,
        g: &mut Graph<F>,
        src: &[TokenId],
        tgt_in: &[TokenId],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        check_lang_tag(tgt_in)?;
        let p = self.config.dropout;
        let hid = match rng {
            Some(rng) => {
                let mem = self.encode_graph(g, src, Some(Dropout { p, rng: &mut *rng }))?;
                self.decode_hidden(g, mem, tgt_in, Some(Dropout { p, rng }))?
            }
            None => {
                let mem = self.encode_graph(g, src, None)?;
                self.decode_hidden(g, mem, tgt_in, None)?
            }
        };
        Ok(self.project(g, hid))
    }

    /// Encoder output for one row, evaluation mode.
    pub fn encode_eval(&self, src: &[TokenId]) -> Result<Mat<F>> {
        let mut g = Graph::new(&[&self.tensors]);
        let v = self.encode_graph(&mut g, src, None)?;
        Ok(g.value(v).clone())
    }

    /// Log-probabilities of the next token after `prefix`, given encoder memory.
    pub fn next_log_probs(&self, memory: &Mat<F>, prefix: &[TokenId]) -> Result<Vec<F>> {
        let mut g = Graph::new(&[&self.tensors]);
        let mem = g.input(memory.clone());
        let hid = self.decode_hidden(&mut g, mem, prefix, None)?;
        let h = g.value(hid);
        let last = Mat::from_vec(1, h.cols, h.row(h.rows - 1).to_vec());
        let logits = matmul(&last, false, &self.tensors[self.layout.embed], true);
        let mut out = vec![F::zero(); logits.cols];
        crate::tensor::log_softmax_row(&logits.data, &mut out);
        Ok(out)
    }
}

fn check_lang_tag(tgt_in: &[TokenId]) -> Result<()> {
    match tgt_in.first() {
        Some(&t) if t == lang_token(LanguageId::Src) || t == lang_token(LanguageId::Tgt) => Ok(()),
        Some(&t) => Err(ModelError::MissingLangTag(t)),
        None => Err(ModelError::Shape("empty decoder input".into())),
    }
}

/// Encoder input for a sequence: its ids followed by EOS.
pub fn frame_source(seq: &TokenSequence) -> Vec<TokenId> {
    let mut v = seq.ids.clone();
    v.push(EOS);
    v
}

/// Teacher-forcing pair for a target sequence: `[LANG, ids..]` and `[ids.., EOS]`.
pub fn frame_target(seq: &TokenSequence) -> (Vec<TokenId>, Vec<TokenId>) {
    let mut tin = Vec::with_capacity(seq.ids.len() + 1);
    tin.push(lang_token(seq.lang));
    tin.extend_from_slice(&seq.ids);
    let mut tout = seq.ids.clone();
    tout.push(EOS);
    (tin, tout)
}

/// Right-pads rows with PAD to a common length.
pub fn pad_batch(rows: &[Vec<TokenId>]) -> Vec<Vec<TokenId>> {
    let len = rows.iter().map(Vec::len).max().unwrap_or(0);
    rows.iter()
        .map(|r| {
            let mut r = r.clone();
            r.resize(len, PAD);
            r
        })
        .collect()
}

fn strip_pad(row: &[TokenId]) -> Vec<TokenId> {
    row.iter().copied().filter(|&t| t != PAD).collect()
}

/// Dense `batch x len x vocab` logits; rows at PAD positions are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<F> {
    pub batch: usize,
    pub len: usize,
    pub vocab: usize,
    pub data: Vec<F>,
}

impl<F: Copy> Logits<F> {
    pub fn at(&self, b: usize, t: usize) -> &[F] {
        let off = (b * self.len + t) * self.vocab;
        &self.data[off..off + self.vocab]
    }
}

/// Teacher-forced logits for a padded batch in evaluation mode.
pub fn forward_logits<F: Scalar>(
    params: &ModelParams<F>,
    src: &[Vec<TokenId>],
    tgt_in: &[Vec<TokenId>],
) -> Result<Logits<F>> {
    if src.len() != tgt_in.len() {
        return Err(ModelError::Shape(format!(
            "{} source rows vs {} target rows",
            src.len(),
            tgt_in.len()
        )));
    }
    let len = tgt_in.iter().map(Vec::len).max().unwrap_or(0);
    let vocab = params.config.vocab_size;
    let rows: Vec<Result<Mat<F>>> = src
        .par_iter()
        .zip(tgt_in.par_iter())
        .map(|(s, t)| {
            let (s, t) = (strip_pad(s), strip_pad(t));
            let mut g = Graph::new(&[&params.tensors]);
            let v = params.logits_graph(&mut g, &s, &t, None)?;
            Ok(g.value(v).clone())
        })
        .collect();
    let mut data = vec![F::zero(); src.len() * len * vocab];
    for (b, m) in rows.into_iter().enumerate() {
        let m = m?;
        let off = b * len * vocab;
        data[off..off + m.data.len()].copy_from_slice(&m.data);
    }
    Ok(Logits {
        batch: src.len(),
        len,
        vocab,
        data,
    })
}

/// Token-level encoder outputs for a padded batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderFeatures<F> {
    /// One `padded_len x d_model` matrix per batch row; PAD rows are zero.
    pub features: Vec<Mat<F>>,
    pub valid: Vec<Vec<bool>>,
}

impl<F: Scalar> EncoderFeatures<F> {
    /// All valid rows stacked into one matrix.
    pub fn valid_rows(&self) -> Mat<F> {
        let d = self.features.first().map(|m| m.cols).unwrap_or(0);
        let mut data = Vec::new();
        let mut n = 0;
        for (m, v) in self.features.iter().zip(&self.valid) {
            for (r, &ok) in v.iter().enumerate() {
                if ok {
                    data.extend_from_slice(m.row(r));
                    n += 1;
                }
            }
        }
        Mat::from_vec(n, d, data)
    }
}

pub fn encode_features<F: Scalar>(
    params: &ModelParams<F>,
    src: &[Vec<TokenId>],
) -> Result<EncoderFeatures<F>> {
    let len = src.iter().map(Vec::len).max().unwrap_or(0);
    let d = params.config.d_model;
    let outs: Vec<Result<(Mat<F>, Vec<bool>)>> = src
        .par_iter()
        .map(|row| {
            let valid: Vec<bool> = (0..len).map(|i| row.get(i).is_some_and(|&t| t != PAD)).collect();
            let ids: Vec<TokenId> = strip_pad(row);
            let enc = params.encode_eval(&ids)?;
            let mut m = Mat::zeros(len, d);
            let mut k = 0;
            for (r, &ok) in valid.iter().enumerate() {
                if ok {
                    m.row_mut(r).copy_from_slice(enc.row(k));
                    k += 1;
                }
            }
            Ok((m, valid))
        })
        .collect();
    let mut features = Vec::with_capacity(outs.len());
    let mut valid = Vec::with_capacity(outs.len());
    for o in outs {
        let (m, v) = o?;
        features.push(m);
        valid.push(v);
    }
    Ok(EncoderFeatures { features, valid })
}

/// Next-token scorer over a fixed source for the generic decoders.
pub struct ModelScorer<'a, F: Scalar> {
    params: &'a ModelParams<F>,
    memory: Mat<F>,
    lang_tag: TokenId,
}

impl<'a, F: Scalar> ModelScorer<'a, F> {
    pub fn new(params: &'a ModelParams<F>, src: &TokenSequence, target_lang: LanguageId) -> Result<Self> {
        let framed = frame_source(src);
        Ok(ModelScorer {
            params,
            memory: params.encode_eval(&framed)?,
            lang_tag: lang_token(target_lang),
        })
    }
}

impl<F: Scalar> StepScorer for ModelScorer<'_, F> {
    fn log_probs(&self, generated: &[TokenId]) -> Vec<f64> {
        let mut prefix = Vec::with_capacity(generated.len() + 1);
        prefix.push(self.lang_tag);
        prefix.extend_from_slice(generated);
        self.params
            .next_log_probs(&self.memory, &prefix)
            .expect("prefix length bounded by max_len")
            .into_iter()
            .map(|x| x.to_f64().unwrap_or(f64::NEG_INFINITY))
            .collect()
    }
}

/// Default generation budget for a source of `len` tokens.
pub fn default_max_new(src_len: usize) -> usize {
    2 * src_len + 5
}

fn budget<F: Scalar>(params: &ModelParams<F>, max_new: usize) -> usize {
    // decoder input holds the language tag plus generated tokens
    max_new.min(params.config.max_len.saturating_sub(1))
}

/// Greedy decoding forced to start with `target_lang`'s tag.
pub fn greedy_decode<F: Scalar>(
    params: &ModelParams<F>,
    src: &TokenSequence,
    target_lang: LanguageId,
    max_new: usize,
) -> Result<TokenSequence> {
    let scorer = ModelScorer::new(params, src, target_lang)?;
    let ids = decode::greedy(&scorer, EOS, budget(params, max_new));
    Ok(TokenSequence {
        lang: target_lang,
        ids,
    })
}

/// Beam search decoding; returns the best hypothesis and its log-probability.
pub fn beam_decode_scored<F: Scalar>(
    params: &ModelParams<F>,
    src: &TokenSequence,
    target_lang: LanguageId,
    beam: usize,
    max_new: usize,
) -> Result<(TokenSequence, f64)> {
    let scorer = ModelScorer::new(params, src, target_lang)?;
    let (ids, score) = decode::beam(&scorer, EOS, beam.max(1), budget(params, max_new));
    Ok((
        TokenSequence {
            lang: target_lang,
            ids,
        },
        score,
    ))
}

pub fn beam_decode<F: Scalar>(
    params: &ModelParams<F>,
    src: &TokenSequence,
    target_lang: LanguageId,
    beam: usize,
    max_new: usize,
) -> Result<TokenSequence> {
    beam_decode_scored(params, src, target_lang, beam, max_new).map(|(s, _)| s)
}

// ---------------------------------------------------------------------------
// Checkpoints

const CKPT_MAGIC: &[u8; 8] = b"UNMTCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the data section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub tensors: Vec<TensorEntry>,
}

/// Layout: magic, `u32` version, `u32` header length, JSON header (config,
/// vocabulary hash, tensor index), then little-endian `f32` data.
pub fn save_checkpoint(path: &Path, params: &ModelParams<f32>, vocab_hash: &str) -> Result<()> {
    let mut offset = 0u64;
    let tensors = params
        .layout
        .names
        .iter()
        .zip(&params.tensors)
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: [t.rows, t.cols],
                offset,
            };
            offset += 4 * t.data.len() as u64;
            e
        })
        .collect();
    let header = CheckpointHeader {
        version: CKPT_VERSION,
        config: params.config,
        vocab_hash: vocab_hash.to_string(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len() + offset as usize);
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in &params.tensors {
        for x in &t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint, verifying version, shapes and (when given) the
/// vocabulary hash.
pub fn load_checkpoint(
    path: &Path,
    expected_vocab_hash: Option<&str>,
) -> Result<(ModelParams<f32>, CheckpointHeader)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: String| ModelError::Checkpoint(m);
    if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let json = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    if header.version != version {
        return Err(bad("header version disagrees with preamble".into()));
    }
    if let Some(h) = expected_vocab_hash {
        if h != header.vocab_hash {
            return Err(bad(format!(
                "vocabulary hash mismatch: checkpoint {} vs expected {h}",
                header.vocab_hash
            )));
        }
    }
    header.config.validate()?;
    let layout = Layout::new(&header.config);
    if layout.names.len() != header.tensors.len() {
        return Err(bad(format!(
            "expected {} tensors, found {}",
            layout.names.len(),
            header.tensors.len()
        )));
    }
    let data = &bytes[16 + hlen..];
    let mut tensors = Vec::with_capacity(layout.names.len());
    for ((name, &(r, c)), e) in layout.names.iter().zip(&layout.shapes).zip(&header.tensors) {
        if *name != e.name || [r, c] != e.shape {
            return Err(bad(format!(
                "tensor {} {:?} does not match expected {name} [{r}, {c}]",
                e.name, e.shape
            )));
        }
        let start = e.offset as usize;
        let end = start + 4 * r * c;
        let raw = data
            .get(start..end)
            .ok_or_else(|| bad(format!("tensor {name} out of bounds")))?;
        let vals = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push(Mat::from_vec(r, c, vals));
    }
    Ok((
        ModelParams {
            config: header.config,
            layout,
            tensors,
        },
        header,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{LANG_SRC, LANG_TGT};

    fn tiny(vocab: usize) -> ModelParams<f32> {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 32,
            max_len: 12,
            vocab_size: vocab,
            dropout: 0.1,
        };
        ModelParams::init(cfg, 3).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::desk(100);
        c.validate().unwrap();
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn eval_is_deterministic() {
        let p = tiny(20);
        let src = vec![vec![8, 9, 10, EOS]];
        let tin = vec![vec![LANG_TGT, 11, 12]];
        let a = forward_logits(&p, &src, &tin).unwrap();
        let b = forward_logits(&p, &src, &tin).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn causal_prefix_invariance() {
        let p = tiny(20);
        let src = vec![vec![8, 9, 10, EOS]];
        let a = forward_logits(&p, &src, &[vec![LANG_SRC, 11, 12, 13]]).unwrap();
        let b = forward_logits(&p, &src, &[vec![LANG_SRC, 11, 19, 7]]).unwrap();
        for t in 0..2 {
            assert_eq!(a.at(0, t), b.at(0, t));
        }
        assert_ne!(a.at(0, 2), b.at(0, 2));
    }

    #[test]
    fn pad_invariance_and_batch_permutation() {
        let p = tiny(20);
        let s1 = vec![8, 9, EOS];
        let s2 = vec![10, 11, 12, 13, EOS];
        let t1 = vec![LANG_TGT, 14];
        let t2 = vec![LANG_SRC, 15, 16];
        let ab = forward_logits(&p, &pad_batch(&[s1.clone(), s2.clone()]), &pad_batch(&[t1.clone(), t2.clone()])).unwrap();
        let ba = forward_logits(&p, &pad_batch(&[s2.clone(), s1.clone()]), &pad_batch(&[t2.clone(), t1.clone()])).unwrap();
        let single = forward_logits(&p, &[s1], &[t1]).unwrap();
        assert_eq!(ab.at(0, 0), single.at(0, 0));
        assert_eq!(ab.at(0, 1), single.at(0, 1));
        for t in 0..3 {
            assert_eq!(ab.at(1, t), ba.at(0, t));
        }
        // padded position of row 0 is zero
        assert!(ab.at(0, 2).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_missing_tag_and_overlong() {
        let p = tiny(20);
        assert!(matches!(
            forward_logits(&p, &[vec![8, EOS]], &[vec![9, 10]]),
            Err(ModelError::MissingLangTag(9))
        ));
        let long = vec![8; 13];
        assert!(matches!(
            forward_logits(&p, &[long], &[vec![LANG_SRC]]),
            Err(ModelError::TooLong { len: 13, max: 12 })
        ));
    }

    #[test]
    fn features_count_non_pad_rows() {
        let p = tiny(20);
        let batch = pad_batch(&[vec![8, 9, EOS], vec![10, 11, 12, 13, EOS]]);
        let f = encode_features(&p, &batch).unwrap();
        assert_eq!(f.valid_rows().rows, 8);
        assert_eq!(f, encode_features(&p, &batch).unwrap());
    }

    #[test]
    fn eos_peaked_output_decodes_empty() {
        let mut p = tiny(20);
        // a huge EOS embedding dominates the tied projection
        let e = p.layout.embed;
        for c in 0..p.config.d_model {
            p.tensors[e].data[EOS as usize * p.config.d_model + c] = 0.0;
        }
        let dn = p.index_of("dec.norm.gamma").unwrap();
        let db = p.index_of("dec.norm.beta").unwrap();
        for c in 0..p.config.d_model {
            p.tensors[dn].data[c] = 0.0;
            p.tensors[db].data[c] = 1.0;
            p.tensors[e].data[EOS as usize * p.config.d_model + c] = 100.0;
        }
        let src = TokenSequence {
            lang: LanguageId::Src,
            ids: vec![8, 9],
        };
        let out = greedy_decode(&p, &src, LanguageId::Tgt, 10).unwrap();
        assert!(out.ids.is_empty());
        assert_eq!(out.lang, LanguageId::Tgt);
    }

    #[test]
    fn checkpoint_roundtrip_and_checks() {
        let p = tiny(20);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &p, "abc").unwrap();
        let (q, h) = load_checkpoint(&path, Some("abc")).unwrap();
        assert_eq!(h.version, CKPT_VERSION);
        assert_eq!(q.tensors, p.tensors);
        let err = load_checkpoint(&path, Some("other")).unwrap_err();
        assert!(err.to_string().contains("vocabulary hash"));
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path, None).is_err());
    }
}
