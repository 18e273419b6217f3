//! The full experiment: pretraining, every adaptation variant, fine-tuning on
//! 100 and 500 labeled pairs, and the feature-overlap comparison. Takes about
//! twenty minutes on one core; `--quick` runs a tiny version.
//!
//!     cargo run --release --example adaptation_table [--quick] [--seed N] [--json OUT]

use unmt::experiment::{run_pipeline, AdaptVariant, ExperimentConfig, PipelineOptions};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let value = |flag: &str| args.iter().position(|a| a == flag).and_then(|i| args.get(i + 1));
    let seed = value("--seed").map(|s| s.parse()).transpose()?.unwrap_or(1);
    let quick = args.iter().any(|a| a == "--quick");
    let cfg = if quick { ExperimentConfig::quick(seed) } else { ExperimentConfig::desk(seed) };
    let opts = PipelineOptions {
        finetune_sizes: if quick { vec![50, 100] } else { vec![100, 500] },
        ..PipelineOptions::default()
    };

    let (_, result) = run_pipeline(&cfg, &opts, None)?;

    println!("\n{:<36} {:>9}", "adaptation (no labels)", "test BLEU");
    for v in AdaptVariant::ALL {
        if let Some(b) = result.bleu(v) {
            println!("{:<36} {b:>9.2}", v.label());
        }
    }
    println!("\n{:<36} {:>9}", format!("fine-tuned from {}", result.finetune_from.label()), "test BLEU");
    println!("{:<36} {:>9.2}", "0 pairs", result.bleu(result.finetune_from).unwrap_or(f64::NAN));
    for (n, b) in &result.finetune {
        println!("{:<36} {b:>9.2}", format!("{n} pairs"));
    }
    println!(
        "\nfeature overlap: pretrained {:.3}, adapted {:.3}",
        result.overlap_baseline, result.overlap_adapted
    );

    if let Some(path) = value("--json") {
        std::fs::write(path, serde_json::to_string_pretty(&result)?)?;
    }
    Ok(())
}
