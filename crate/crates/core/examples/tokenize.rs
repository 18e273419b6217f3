//! Shared vocabulary over both scripts, with character fallback for words
//! the vocabulary has not seen.

use unmt::corpus::{default_cipher, oracle_translate, Direction, LanguageId};
use unmt::tokenizer::Vocabulary;

fn main() -> anyhow::Result<()> {
    let spec = default_cipher(1);
    let src = ["red cotton shirt for men", "nike shoes for women"];
    let tgt: Vec<String> = src
        .iter()
        .map(|l| oracle_translate(l, &spec, Direction::SrcToTgt))
        .collect::<Result<_, _>>()?;
    let mut corpus: Vec<String> = src.iter().map(|s| s.to_string()).collect();
    corpus.extend(tgt.iter().cloned());
    let vocab = Vocabulary::build(&corpus)?;
    println!("{} tokens, {} of them whole words", vocab.len(), vocab.num_words());

    for (line, lang) in [("red shirt", LanguageId::Src), ("redshoes", LanguageId::Src), (tgt[1].as_str(), LanguageId::Tgt)] {
        let seq = vocab.encode(line, lang)?;
        let pieces: Vec<&str> = seq.ids.iter().map(|&i| vocab.token(i).unwrap_or("?")).collect();
        println!("{line:>28} -> {:?} -> {:?}", pieces, vocab.decode_seq(&seq)?);
    }
    Ok(())
}
