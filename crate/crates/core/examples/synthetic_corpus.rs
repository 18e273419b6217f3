//! Generates a small bundle, shows a few lines of each split and checks the
//! cipher oracle in both directions.
//!
//!     cargo run --release --example synthetic_corpus [OUT_DIR]

use unmt::corpus::{
    default_cipher, detect_language, generate_bundle, oracle_translate, write_bundle, CorpusSizes, Direction,
};

fn main() -> anyhow::Result<()> {
    let seed = 1;
    let spec = default_cipher(seed);
    let sizes = CorpusSizes {
        pretrain_parallel: 20,
        mono_src: 20,
        mono_tgt: 20,
        validation_mono_src: 5,
        test_parallel: 5,
        finetune_parallel: 5,
    };
    let bundle = generate_bundle(seed, &sizes, &spec)?;

    println!("out-of-domain parallel (pretraining):");
    for (s, t) in bundle.pretrain_parallel.iter().take(3) {
        println!("  {s}\n  {t}\n");
    }
    println!("in-domain queries, target side with source reference:");
    for (t, s) in bundle.test_parallel.iter().take(3) {
        let back = oracle_translate(t, &spec, Direction::TgtToSrc)?;
        assert_eq!(&back, s);
        println!("  {t}  ->  {s}  [{:?}]", detect_language(t, &spec)?);
    }

    if let Some(dir) = std::env::args().nth(1) {
        write_bundle(dir.as_ref(), &bundle, seed, &sizes, &spec)?;
        println!("\nbundle written to {dir}");
    }
    Ok(())
}
