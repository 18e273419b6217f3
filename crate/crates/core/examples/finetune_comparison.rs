//! Fine-tuning with small labeled sets, starting either from the pretrained
//! model or from the adapted one.
//!
//!     cargo run --release --example finetune_comparison [--quick]

use unmt::experiment::{adapt, finetune_on, prepare, pretrain, test_bleu, AdaptVariant, ExperimentConfig};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let quick = std::env::args().any(|a| a == "--quick");
    let cfg = if quick { ExperimentConfig::quick(1) } else { ExperimentConfig::desk(1) };
    let sizes: &[usize] = if quick { &[0, 50, 100] } else { &[0, 100, 500] };

    let prep = prepare(cfg.seed, &cfg.sizes)?;
    let (pretrained, _) = pretrain(&prep, &cfg, None)?;
    let (adapted, _) = adapt(&prep, &pretrained, AdaptVariant::CrossLTDenoiseDropChar, &cfg, None)?;

    println!("\n{:>7} {:>12} {:>9}", "labels", "from pretr.", "from adap.");
    for &n in sizes {
        let (a, b) = if n == 0 {
            (test_bleu(&prep, &pretrained, cfg.test_beam)?, test_bleu(&prep, &adapted, cfg.test_beam)?)
        } else {
            (finetune_on(&prep, &pretrained, n, &cfg, None)?.1, finetune_on(&prep, &adapted, n, &cfg, None)?.1)
        };
        println!("{n:>7} {a:>12.2} {b:>9.2}");
    }
    Ok(())
}
