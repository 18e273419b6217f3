//! Pretrains on the out-of-domain parallel split and translates a few
//! in-domain queries, which mostly fail: that is the domain gap.
//!
//!     cargo run --release --example pretrain_and_translate [--quick] [CKPT]

use unmt::corpus::LanguageId;
use unmt::eval::ModelTranslator;
use unmt::experiment::{prepare, pretrain, test_bleu, ExperimentConfig};
use unmt::model::save_checkpoint;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let quick = args.iter().any(|a| a == "--quick");
    let cfg = if quick { ExperimentConfig::quick(1) } else { ExperimentConfig::desk(1) };

    let prep = prepare(cfg.seed, &cfg.sizes)?;
    let (params, report) = pretrain(&prep, &cfg, None)?;
    println!("pretrained: {} parameters, best at update {}", params.num_params(), report.best_update);

    let translator = ModelTranslator { params: &params, vocab: &prep.vocab, beam: cfg.test_beam };
    for (pairs, name) in [(&prep.bundle.pretrain_parallel, "out-of-domain"), (&prep.bundle.test_parallel, "in-domain")] {
        println!("\n{name}:");
        for (a, b) in pairs.iter().take(4) {
            // pretraining pairs are (src, tgt), test pairs (tgt, src)
            let (tgt, src) = if name == "in-domain" { (a, b) } else { (b, a) };
            println!("  ref {src}\n  hyp {}", translator.translate_one(tgt, LanguageId::Src));
        }
    }
    println!("\nin-domain test BLEU: {:.2}", test_bleu(&prep, &params, cfg.test_beam)?);

    if let Some(path) = args.iter().find(|a| !a.starts_with("--")) {
        save_checkpoint(path.as_ref(), &params, &prep.vocab.hash())?;
        prep.vocab.save(&unmt::cli::vocab_path(path.as_ref()))?;
        println!("saved {path}");
    }
    Ok(())
}
