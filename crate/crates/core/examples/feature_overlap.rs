//! Encoder features of source and target queries before and after
//! adaptation, projected to 2-D and written as SVG scatter plots.
//!
//!     cargo run --release --example feature_overlap [--quick] [OUT_DIR]

use std::path::PathBuf;

use unmt::analysis::emit_scatter;
use unmt::experiment::{adapt, overlap, prepare, pretrain, AdaptVariant, ExperimentConfig};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let quick = args.iter().any(|a| a == "--quick");
    let out = args.iter().find(|a| !a.starts_with("--")).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let cfg = if quick { ExperimentConfig::quick(1) } else { ExperimentConfig::desk(1) };

    let prep = prepare(cfg.seed, &cfg.sizes)?;
    let (pretrained, _) = pretrain(&prep, &cfg, None)?;
    let (adapted, _) = adapt(&prep, &pretrained, AdaptVariant::CrossLTDenoiseDropChar, &cfg, None)?;

    std::fs::create_dir_all(&out)?;
    for (name, params) in [("pretrained", &pretrained), ("adapted", &adapted)] {
        let (stat, cloud) = overlap(&prep, params, &cfg)?;
        let path = out.join(format!("features_{name}.svg"));
        emit_scatter(&cloud, &path)?;
        println!("{name:<10} overlap {stat:.3}  -> {}", path.display());
    }
    Ok(())
}
