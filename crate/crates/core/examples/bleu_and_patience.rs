//! Corpus BLEU on a few hand-made hypotheses, and the patience rule applied
//! to a validation history.

use unmt::eval::{corpus_bleu, early_stop_check};

fn main() -> anyhow::Result<()> {
    let refs = ["red cotton shirt for men", "nike running shoes", "steel water bottle 1 litre"];
    let cases: [(&str, [&str; 3]); 3] = [
        ("perfect", refs),
        ("one word dropped", ["red cotton shirt men", "nike running shoes", "steel water bottle 1 litre"]),
        ("word salad", ["men for shirt cotton red", "shoes running nike", "litre 1 bottle water steel"]),
    ];
    for (name, hyps) in cases {
        let r = corpus_bleu(&hyps, &refs)?;
        println!("{name:<17} BLEU {:6.2}  BP {:.3}  p = {:.3?}", r.bleu, r.brevity_penalty, r.precisions);
    }

    let history = [12.0, 30.5, 41.0, 40.2, 40.9, 39.7];
    for n in 1..=history.len() {
        println!("after {n} evaluations: {:?}", early_stop_check(&history[..n], 3));
    }
    Ok(())
}
