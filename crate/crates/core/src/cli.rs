//! Command-line front end. Every subcommand takes explicit paths, writes a
//! run manifest next to its main output, and fails with a one-line message.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{collect_features, emit_scatter, feature_overlap_report};
use crate::corpus::{
    self, detect_language, generate_bundle, read_bundle, read_query_pairs, CipherSpec, CorpusSizes, LanguageId,
    ReorderRule, DEFAULT_TARGET_OFFSET,
};
use crate::eval::{corpus_bleu, evaluate_testset, ModelTranslator};
use crate::experiment::ModelShape;
use crate::model::{load_checkpoint, save_checkpoint, ModelParams};
use crate::noise::NoiseKind;
use crate::tokenizer::Vocabulary;
use crate::training::{
    finetune, one_time_backtranslate_train, pretrain_supervised, train_adapt, MetricsLog, Objective,
    TrainConfig,
};

#[derive(Parser, Debug)]
#[command(name = "unmt", version, about = "Unsupervised domain adaptation for a toy translator")]
pub struct Cli {
    /// Log training progress to standard error.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus bundle.
    GenCorpus(GenCorpusArgs),
    /// Train a model from scratch on the out-of-domain parallel split.
    Pretrain(PretrainArgs),
    /// Adapt a pretrained model on the in-domain monolingual splits.
    Adapt(AdaptArgs),
    /// Supervised target-to-source fine-tuning on labeled pairs.
    Finetune(FinetuneArgs),
    /// Translate lines from standard input.
    Translate(TranslateArgs),
    /// Score a checkpoint (or ready-made hypotheses) on a test file.
    Evaluate(EvaluateArgs),
    /// Project encoder features to 2-D and write an SVG scatter plot.
    Visualize(VisualizeArgs),
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub pretrain_parallel: Option<usize>,
    #[arg(long)]
    pub mono_src: Option<usize>,
    #[arg(long)]
    pub mono_tgt: Option<usize>,
    #[arg(long)]
    pub validation: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub finetune: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AdaptArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated: crosslt, denoise, adv. Overrides the config file.
    #[arg(long, value_delimiter = ',')]
    pub objectives: Option<Vec<Objective>>,
    /// Comma-separated: mask, dropchar, shuffle. Overrides the config file.
    #[arg(long, value_delimiter = ',')]
    pub noise: Option<Vec<NoiseKind>>,
    /// Back-translate once with the frozen model instead of iterating.
    #[arg(long)]
    pub one_time_backtranslation: bool,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// TSV of `source<TAB>target` pairs.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Use only the first N pairs.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub lang_to: LanguageId,
    #[arg(long, default_value_t = 3)]
    pub beam: usize,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// TSV of `source<TAB>target` pairs; the target side is translated and
    /// scored against the source side.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, required_unless_present = "hypotheses")]
    pub init: Option<PathBuf>,
    /// Score these lines instead of decoding with a model.
    #[arg(long, conflicts_with = "init")]
    pub hypotheses: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub beam: usize,
}

#[derive(Args, Debug)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub init: PathBuf,
    /// Text files of queries in either language; each line is classified by script.
    #[arg(long, num_args = 1.., required = true)]
    pub sample: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub per_language: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_TARGET_OFFSET)]
    pub target_offset: u32,
}

/// Record of one invocation, written as `<output>.manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub seed: Option<u64>,
    /// Config file contents, verbatim.
    pub config: Option<String>,
    pub bundle_manifest: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_log: Option<PathBuf>,
    /// Commands that produced the inputs, oldest first, ending with this one.
    pub history: Vec<Vec<String>>,
}

pub fn manifest_path(output: &Path) -> PathBuf {
    sidecar(output, "manifest.json")
}

pub fn vocab_path(ckpt: &Path) -> PathBuf {
    sidecar(ckpt, "vocab")
}

pub fn metrics_path(output: &Path) -> PathBuf {
    sidecar(output, "metrics.jsonl")
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

const MODEL_KEYS: [&str; 7] = ["d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ff", "max_len", "dropout"];

/// Flat TOML config: model shape keys plus any [`TrainConfig`] field.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub text: Option<String>,
    pub model: ModelShape,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).context("config")?;
        let (model, train): (toml::Table, toml::Table) =
            table.into_iter().partition(|(k, _)| MODEL_KEYS.contains(&k.as_str()));
        let model: ModelShape = toml::Value::Table(model).try_into().context("config")?;
        let train: TrainConfig = toml::Value::Table(train).try_into().context("config")?;
        train.validate()?;
        Ok(RunConfig {
            text: Some(text.to_string()),
            model,
            train,
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig {
                text: None,
                model: ModelShape::default(),
                train: TrainConfig::default(),
            }),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("{}", p.display()))?;
                Self::parse(&text).with_context(|| format!("{}", p.display()))
            }
        }
    }
}

fn load_model(ckpt: &Path) -> Result<(ModelParams<f32>, Vocabulary)> {
    let vp = vocab_path(ckpt);
    let vocab = Vocabulary::load(&vp).with_context(|| format!("{}", vp.display()))?;
    let (params, _) = load_checkpoint(ckpt, Some(&vocab.hash())).with_context(|| format!("{}", ckpt.display()))?;
    Ok((params, vocab))
}

fn save_model(ckpt: &Path, params: &ModelParams<f32>, vocab: &Vocabulary) -> Result<()> {
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("{}", dir.display()))?;
    }
    vocab.save(&vocab_path(ckpt)).context("saving vocabulary")?;
    save_checkpoint(ckpt, params, &vocab.hash()).with_context(|| format!("{}", ckpt.display()))?;
    Ok(())
}

fn prior_history(input: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(manifest_path(input))
        .ok()
        .and_then(|t| serde_json::from_str::<RunManifest>(&t).ok())
        .map(|m| m.history)
        .unwrap_or_default()
}

fn write_manifest(output: &Path, mut m: RunManifest) -> Result<()> {
    m.history.push(m.command.clone());
    let path = manifest_path(output);
    let text = serde_json::to_string_pretty(&m)? + "\n";
    fs::write(&path, text).with_context(|| format!("{}", path.display()))
}

/// Metrics log written under a `.partial` name and renamed on success.
struct PendingLog {
    partial: PathBuf,
    done: PathBuf,
    log: MetricsLog<Box<dyn Write + Send>>,
}

impl PendingLog {
    fn create(output: &Path) -> Result<Self> {
        let done = metrics_path(output);
        let partial = sidecar(&done, "partial");
        let f = fs::File::create(&partial).with_context(|| format!("{}", partial.display()))?;
        Ok(PendingLog {
            partial,
            done,
            log: MetricsLog::new(Box::new(BufWriter::new(f))),
        })
    }

    fn finish(self) -> Result<PathBuf> {
        drop(self.log);
        fs::rename(&self.partial, &self.done)?;
        Ok(self.done)
    }
}


fn gen_corpus(a: &GenCorpusArgs, argv: &[String]) -> Result<()> {
    let d = CorpusSizes::default();
    let sizes = CorpusSizes {
        pretrain_parallel: a.pretrain_parallel.unwrap_or(d.pretrain_parallel),
        mono_src: a.mono_src.unwrap_or(d.mono_src),
        mono_tgt: a.mono_tgt.unwrap_or(d.mono_tgt),
        validation_mono_src: a.validation.unwrap_or(d.validation_mono_src),
        test_parallel: a.test.unwrap_or(d.test_parallel),
        finetune_parallel: a.finetune.unwrap_or(d.finetune_parallel),
    };
    let spec = corpus::default_cipher(a.seed);
    let bundle = generate_bundle(a.seed, &sizes, &spec)?;
    corpus::write_bundle(&a.out, &bundle, a.seed, &sizes, &spec)?;
    write_manifest(
        &a.out.join("run"),
        RunManifest {
            command: argv.to_vec(),
            seed: Some(a.seed),
            config: None,
            bundle_manifest: Some(a.out.join(corpus::MANIFEST_FILE)),
            checkpoints: vec![],
            metrics_log: None,
            history: vec![],
        },
    )
}

fn pretrain(a: &PretrainArgs, argv: &[String]) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let (bundle, _) = read_bundle(&a.corpus)?;
    let vocab = Vocabulary::build(&bundle.training_lines())?;
    let model_cfg = cfg.model.with_vocab(vocab.len());
    let mut log = PendingLog::create(&a.out)?;
    let (params, _) = pretrain_supervised(model_cfg, &bundle.pretrain_parallel, &vocab, &cfg.train, Some(&mut log.log))?;
    save_model(&a.out, &params, &vocab)?;
    let metrics = log.finish()?;
    write_manifest(
        &a.out,
        RunManifest {
            command: argv.to_vec(),
            seed: Some(cfg.train.seed),
            config: cfg.text,
            bundle_manifest: Some(a.corpus.join(corpus::MANIFEST_FILE)),
            checkpoints: vec![a.out.clone()],
            metrics_log: Some(metrics),
            history: prior_history(&a.corpus.join("run")),
        },
    )
}

fn adapt(a: &AdaptArgs, argv: &[String]) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(o) = &a.objectives {
        cfg.train.enabled_objectives = o.iter().copied().collect();
    }
    if let Some(n) = &a.noise {
        cfg.train.enabled_noise = n.iter().copied().collect::<BTreeSet<_>>();
    }
    cfg.train.validate()?;
    let (bundle, manifest) = read_bundle(&a.corpus)?;
    let (params, vocab) = load_model(&a.init)?;
    let mut log = PendingLog::create(&a.out)?;
    let adapted = if a.one_time_backtranslation {
        one_time_backtranslate_train(&params, &bundle, &manifest.cipher, &vocab, &cfg.train, Some(&mut log.log))?.0
    } else {
        train_adapt(params, &bundle, &manifest.cipher, &vocab, &cfg.train, Some(&mut log.log))?.0
    };
    save_model(&a.out, &adapted, &vocab)?;
    let metrics = log.finish()?;
    write_manifest(
        &a.out,
        RunManifest {
            command: argv.to_vec(),
            seed: Some(cfg.train.seed),
            config: cfg.text,
            bundle_manifest: Some(a.corpus.join(corpus::MANIFEST_FILE)),
            checkpoints: vec![a.init.clone(), a.out.clone()],
            metrics_log: Some(metrics),
            history: prior_history(&a.init),
        },
    )
}

fn finetune_cmd(a: &FinetuneArgs, argv: &[String]) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let mut pairs = read_query_pairs(&a.pairs)?;
    if let Some(n) = a.limit {
        pairs.truncate(n);
    }
    let (params, vocab) = load_model(&a.init)?;
    let mut log = PendingLog::create(&a.out)?;
    let (tuned, _) = finetune(params, &pairs, &vocab, &cfg.train, Some(&mut log.log))?;
    save_model(&a.out, &tuned, &vocab)?;
    let metrics = log.finish()?;
    write_manifest(
        &a.out,
        RunManifest {
            command: argv.to_vec(),
            seed: Some(cfg.train.seed),
            config: cfg.text,
            bundle_manifest: None,
            checkpoints: vec![a.init.clone(), a.out.clone()],
            metrics_log: Some(metrics),
            history: prior_history(&a.init),
        },
    )
}

fn translate(a: &TranslateArgs, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let (params, vocab) = load_model(&a.init)?;
    let tr = ModelTranslator {
        params: &params,
        vocab: &vocab,
        beam: a.beam,
    };
    for line in input.lines() {
        let line = line.context("reading standard input")?;
        writeln!(out, "{}", tr.translate_one(line.trim(), a.lang_to))?;
    }
    Ok(())
}

fn evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let test = read_query_pairs(&a.test)?;
    let report = match (&a.hypotheses, &a.init) {
        (Some(h), _) => {
            let hyps = corpus::read_mono(h)?;
            let refs: Vec<&str> = test.iter().map(|(_, s)| s.as_str()).collect();
            corpus_bleu(&hyps, &refs)?
        }
        (None, Some(ckpt)) => {
            let (params, vocab) = load_model(ckpt)?;
            let tr = ModelTranslator {
                params: &params,
                vocab: &vocab,
                beam: a.beam,
            };
            evaluate_testset(&tr, &test)?
        }
        (None, None) => bail!("either --init or --hypotheses is required"),
    };
    writeln!(out, "{}", serde_json::to_string(&report)?)?;
    Ok(())
}

#[derive(Serialize)]
struct VisualizeReport {
    overlap: f64,
    src_points: usize,
    tgt_points: usize,
    svg: PathBuf,
}

fn visualize(a: &VisualizeArgs, argv: &[String], out: &mut dyn Write) -> Result<()> {
    let (params, vocab) = load_model(&a.init)?;
    let script = CipherSpec::new(Vec::<(String, String)>::new(), ReorderRule::Identity, a.target_offset)?;
    let (mut src, mut tgt) = (Vec::new(), Vec::new());
    for f in &a.sample {
        for line in corpus::read_mono(f)? {
            match detect_language(&line, &script)? {
                LanguageId::Src => src.push(line),
                LanguageId::Tgt => tgt.push(line),
            }
        }
    }
    let mut cloud = collect_features(&params, &vocab, &src, &tgt, a.per_language, a.seed)?;
    cloud.project()?;
    let overlap = feature_overlap_report(&cloud)?;
    emit_scatter(&cloud, &a.out)?;
    let count = |l| cloud.points.iter().filter(|p| p.1 == l).count();
    let report = VisualizeReport {
        overlap,
        src_points: count(LanguageId::Src),
        tgt_points: count(LanguageId::Tgt),
        svg: a.out.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&report)?)?;
    write_manifest(
        &a.out,
        RunManifest {
            command: argv.to_vec(),
            seed: Some(a.seed),
            config: None,
            bundle_manifest: None,
            checkpoints: vec![a.init.clone()],
            metrics_log: None,
            history: prior_history(&a.init),
        },
    )
}

/// Runs one parsed command with explicit standard streams.
pub fn run(cli: &Cli, argv: &[String], input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::GenCorpus(a) => gen_corpus(a, argv),
        Command::Pretrain(a) => pretrain(a, argv),
        Command::Adapt(a) => adapt(a, argv),
        Command::Finetune(a) => finetune_cmd(a, argv),
        Command::Translate(a) => translate(a, input, out),
        Command::Evaluate(a) => evaluate(a, out),
        Command::Visualize(a) => visualize(a, argv, out),
    }
}

/// Process entry point; returns the exit code.
pub fn main_from_env() -> i32 {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).init();
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run(&cli, &argv, &mut stdin.lock(), &mut out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_config_splits_model_and_training_keys() {
        let c = RunConfig::parse("d_model = 32\nlr = 0.001\nenabled_objectives = [\"crosslt\", \"denoise\"]\nenabled_noise = [\"dropchar\"]\n").unwrap();
        assert_eq!(c.model.d_model, 32);
        assert_eq!(c.train.lr, 0.001);
        assert!(c.train.enabled_objectives.contains(&Objective::DenoiseAE));
        assert!(RunConfig::parse("nonsense = 1\n").is_err());
    }

    #[test]
    fn sidecars() {
        assert_eq!(vocab_path(Path::new("a/m.ckpt")), PathBuf::from("a/m.ckpt.vocab"));
        assert_eq!(manifest_path(Path::new("m")), PathBuf::from("m.manifest.json"));
    }
}
