//! Finite-difference check of every parameter tensor of a tiny model in
//! 64-bit arithmetic.

use unmt::corpus::LanguageId;
use unmt::model::{ModelConfig, ModelParams};
use unmt::tokenizer::Vocabulary;
use unmt::training::{grad_check, supervised_grads, Example};

fn main() -> anyhow::Result<()> {
    let lines = ["red shirt for men", "blue cotton saree", "nike shoes"];
    let vocab = Vocabulary::build(&lines)?;
    let config = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 2,
        n_dec_layers: 2,
        d_ff: 16,
        max_len: 12,
        vocab_size: vocab.len(),
        dropout: 0.0,
    };
    let params = ModelParams::<f64>::init(config, 5)?;
    let batch = vec![
        Example::new(&vocab.encode(lines[0], LanguageId::Src)?, &vocab.encode(lines[1], LanguageId::Tgt)?),
        Example::new(&vocab.encode(lines[2], LanguageId::Tgt)?, &vocab.encode(lines[0], LanguageId::Src)?),
    ];
    let loss = |p: &ModelParams<f64>| supervised_grads(p, &batch, 0.1, None).unwrap().0;
    let (_, analytic) = supervised_grads(&params, &batch, 0.1, None)?;
    let all: Vec<usize> = (0..params.tensors.len()).collect();
    let results = grad_check(&params, &all, loss, &analytic, 1e-4);
    for r in &results {
        println!("{:<24} {:.2e} {}", r.name, r.max_rel_err, if r.passed { "ok" } else { "FAIL" });
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} tensors, {failed} failed", results.len());
    Ok(())
}
