use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use unmt::cli::{manifest_path, vocab_path, RunManifest};
use unmt::corpus::{read_query_pairs, LanguageId};
use unmt::model::{default_max_new, greedy_decode, load_checkpoint};
use unmt::tokenizer::Vocabulary;

const BIN: &str = env!("CARGO_BIN_EXE_unmt");

fn unmt(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn unmt_ok(args: &[&str]) -> String {
    let out = unmt(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn with_stdin(args: &[&str], input: &str) -> String {
    let mut child = Command::new(BIN)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const CONFIG: &str = "\
d_model = 16
n_heads = 2
n_enc_layers = 1
n_dec_layers = 1
d_ff = 32
batch_size = 8
max_updates = 40
eval_interval_updates = 20
validation_limit = 10
";

#[test]
fn end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    let config = d.join("tiny.toml");
    std::fs::write(&config, CONFIG).unwrap();
    let (pre, ada, fin) = (d.join("pre.ckpt"), d.join("ada.ckpt"), d.join("fin.ckpt"));

    unmt_ok(&[
        "gen-corpus", "--seed", "4", "--out", p(&corpus), "--pretrain-parallel", "200", "--mono-src", "60",
        "--mono-tgt", "60", "--validation", "10", "--test", "30", "--finetune", "20",
    ]);
    assert!(corpus.join("manifest.json").exists());
    let raw = std::fs::read_to_string(corpus.join("test.tsv")).unwrap();
    let first = raw.lines().next().unwrap().split('\t').next().unwrap();
    assert!(first.is_ascii(), "test.tsv must be source<TAB>target: {first}");

    unmt_ok(&["pretrain", "--verbose", "--corpus", p(&corpus), "--config", p(&config), "--out", p(&pre)]);
    unmt_ok(&[
        "adapt", "--corpus", p(&corpus), "--init", p(&pre), "--config", p(&config), "--out", p(&ada),
        "--objectives", "crosslt,denoise", "--noise", "dropchar",
    ]);
    unmt_ok(&[
        "finetune", "--pairs", p(&corpus.join("finetune.tsv")), "--init", p(&ada), "--config", p(&config),
        "--out", p(&fin), "--limit", "10",
    ]);
    for ckpt in [&pre, &ada, &fin] {
        assert!(ckpt.exists() && vocab_path(ckpt).exists());
    }
    let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(manifest_path(&fin)).unwrap()).unwrap();
    assert_eq!(manifest.history.len(), 4, "gen-corpus, pretrain, adapt, finetune");
    assert_eq!(manifest.config.as_deref(), Some(CONFIG));
    let metrics = std::fs::read_to_string(manifest.metrics_log.unwrap()).unwrap();
    assert!(metrics.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));

    // beam 1 through the binary equals library greedy decoding
    let test = read_query_pairs(&corpus.join("test.tsv")).unwrap();
    let inputs: Vec<&str> = test.iter().map(|(t, _)| t.as_str()).take(10).collect();
    let got = with_stdin(&["translate", "--init", p(&ada), "--lang-to", "src", "--beam", "1"], &(inputs.join("\n") + "\n"));
    let vocab = Vocabulary::load(&vocab_path(&ada)).unwrap();
    let (params, _) = load_checkpoint(&ada, Some(&vocab.hash())).unwrap();
    let want: Vec<String> = inputs
        .iter()
        .map(|l| {
            let seq = vocab.encode(l, LanguageId::Tgt).unwrap();
            let out = greedy_decode(&params, &seq, LanguageId::Src, default_max_new(seq.ids.len())).unwrap();
            vocab.decode_seq(&out).unwrap()
        })
        .collect();
    assert_eq!(got.lines().collect::<Vec<_>>(), want);

    // the reference side itself scores 100
    let hyps = d.join("hyps.txt");
    let refs: Vec<&str> = test.iter().map(|(_, s)| s.as_str()).collect();
    std::fs::write(&hyps, refs.join("\n") + "\n").unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&unmt_ok(&["evaluate", "--test", p(&corpus.join("test.tsv")), "--hypotheses", p(&hyps)]))
            .unwrap();
    assert_eq!(report["bleu"].as_f64(), Some(100.0));
    let report: serde_json::Value =
        serde_json::from_str(&unmt_ok(&["evaluate", "--test", p(&corpus.join("test.tsv")), "--init", p(&fin)])).unwrap();
    assert!((0.0..=100.0).contains(&report["bleu"].as_f64().unwrap()));

    let svg = d.join("cloud.svg");
    let vis: serde_json::Value = serde_json::from_str(&unmt_ok(&[
        "visualize", "--init", p(&ada), "--sample", p(&corpus.join("mono.src")), p(&corpus.join("mono.tgt")),
        "--out", p(&svg), "--per-language", "20",
    ]))
    .unwrap();
    assert!((0.0..=1.0).contains(&vis["overlap"].as_f64().unwrap()));
    assert!(std::fs::read_to_string(&svg).unwrap().contains("data-lang=\"tgt\""));

    // a vocabulary that does not belong to the checkpoint is refused
    let other = Vocabulary::build(&["completely different words"]).unwrap();
    other.save(&vocab_path(&ada)).unwrap();
    let out = unmt(&["translate", "--init", p(&ada), "--lang-to", "src"]);
    assert!(!out.status.success());
}

#[test]
fn errors_are_one_line() {
    let out = unmt(&["pretrain", "--corpus", "/nonexistent/corpus", "--out", "/tmp/never.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error:"));

    let out = unmt(&["pretrain", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));

    let out = unmt(&["evaluate", "--test", "/nonexistent.tsv"]);
    assert!(!out.status.success());
}
