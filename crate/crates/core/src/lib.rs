//! Unsupervised domain adaptation for a small many-to-many transformer
//! translator.
//!
//! A model is first trained on an out-of-domain parallel corpus, then adapted
//! to in-domain monolingual text of both languages with denoising
//! auto-encoding, iterative back-translation (cross-language training) and
//! adversarial alignment of encoder features. Validation needs no parallel
//! data: it scores round-trip reconstructions. A synthetic cipher language
//! pair supplies a ground-truth translator so every trend is measurable.

pub mod corpus;
pub mod noise;
pub mod tensor;
pub mod tokenizer;
pub mod decode;
pub mod model;
pub mod eval;
pub mod training;
pub mod analysis;
pub mod experiment;
pub mod cli;
