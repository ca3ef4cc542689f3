//! Command-line front end.
//!
//! One subcommand per workflow: `import` (raw dataset -> masked corpus +
//! vocabulary), `synth` (synthetic corpus), `train`, `generate`,
//! `select-keywords`, `evaluate`, `kfold`, and `gradcheck`. Every command
//! that writes artifacts also writes a `RunManifest` JSON next to them, and
//! every failure exits nonzero with a one-line machine-readable error on
//! stderr: `{"code", "message", "context"}`. Exit codes: 0 success, 2 usage,
//! 3 data/io, 4 numerical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    build_vocab, kfold_split, load_jsonl, load_masked_jsonl, preprocess, synth_corpus,
    tokenize_equation, tokenize_mwp, write_masked_jsonl, MaskedExample, StopList,
};
use crate::diagnostics::{gradient_suite, SUITE_TOLERANCE};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::model::{decode_tokens, generator_input, parser_input, GenerateOptions};
use crate::rng;
use crate::selector::{keyword_probs, select_keywords, SelectionMode};
use crate::train::{
    load_checkpoint, run_training, save_checkpoint, threshold_generator_input,
    train_eval_mwp2eq, Models, TrainConfig,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(
    name = "mwpgen",
    version,
    about = "Equation- and keyword-conditioned math word problem generation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Preprocess a raw JSONL dataset: mask numbers, tokenize, build the vocabulary.
    Import(ImportArgs),
    /// Write a synthetic masked corpus for smoke tests and ablations.
    Synth(SynthArgs),
    /// Run the two-stage training schedule described by a TOML config.
    Train(TrainArgs),
    /// Generate problems for an equation (and optional keywords) from a checkpoint.
    Generate(GenerateArgs),
    /// Score keyword probabilities for a problem text and apply the 0.5 threshold.
    SelectKeywords(SelectKeywordsArgs),
    /// Generate against a held-out split and report all metrics.
    Evaluate(EvaluateArgs),
    /// K-fold cross-validation: one training + evaluation per fold, plus the mean.
    Kfold(KfoldArgs),
    /// Verify every gradient path against finite differences.
    Gradcheck(GradcheckArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Import(_) => "import",
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Generate(_) => "generate",
            Command::SelectKeywords(_) => "select-keywords",
            Command::Evaluate(_) => "evaluate",
            Command::Kfold(_) => "kfold",
            Command::Gradcheck(_) => "gradcheck",
        }
    }
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// Raw dataset: JSON Lines with {"id", "mwp", "equation"}.
    #[arg(long)]
    pub input: PathBuf,
    /// Masked-corpus JSONL to write.
    #[arg(long)]
    pub output: PathBuf,
    /// Vocabulary JSON to write (default: OUTPUT with extension .vocab.json).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Minimum frequency for a token to enter the vocabulary.
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of examples.
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Masked-corpus JSONL to write.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training config; omit to use built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. --set alpha=0.5 or --set generator.d_model=32.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Masked-corpus JSONL (from `import` or `synth`).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Minimum token frequency for the vocabulary built from DATA.
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Masked equation, e.g. "x = ( num1 + num2 )".
    #[arg(long)]
    pub equation: String,
    /// Comma-separated keywords for the context slot.
    #[arg(long, default_value = "")]
    pub keywords: String,
    /// "greedy" or a positive sampling temperature.
    #[arg(long, default_value = "greedy")]
    pub mode: String,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 60)]
    pub max_new: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the generations (one per line) to this file.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectKeywordsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Problem text to score (masked or raw; numbers are not re-masked).
    #[arg(long)]
    pub mwp: String,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Held-out masked-corpus JSONL.
    #[arg(long)]
    pub data: PathBuf,
    /// Training corpus for the novelty metric (default: DATA).
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    pub max_new: usize,
    /// Report JSON to write (default: stdout only).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct KfoldArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    #[arg(long, default_value_t = 60)]
    pub max_new: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Provenance record written next to every command's artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_fingerprint: Option<String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifest {
    fn begin(command: &str) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            seed: None,
            config_path: None,
            config: None,
            config_fingerprint: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_at: chrono::Utc::now().to_rfc3339(),
            finished_at: String::new(),
        }
    }

    fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.display().to_string());
        self
    }

    fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.display().to_string());
        self
    }

    /// Finalizes the timestamp and writes the manifest atomically. For a
    /// directory artifact this is `<dir>/manifest.json`; for a file it is a
    /// `<file>.manifest.json` sibling.
    fn finish(mut self, beside: &Path) -> Result<PathBuf> {
        self.finished_at = chrono::Utc::now().to_rfc3339();
        let path = if beside.is_dir() {
            beside.join("manifest.json")
        } else {
            let mut name = beside.as_os_str().to_owned();
            name.push(".manifest.json");
            PathBuf::from(name)
        };
        let mut bytes = serde_json::to_vec_pretty(&self)?;
        bytes.push(b'\n');
        atomic_write(&path, &bytes)?;
        Ok(path)
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// SHA-256 over the canonical JSON form of a resolved config.
pub fn config_fingerprint(config: &TrainConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for byte in digest {
        let _ = write!(hex, "{byte:02x}");
    }
    hex
}

// Overlay wins; tables merge recursively so partial nested sections work.
fn deep_merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (key, value) in o {
                match b.get_mut(&key) {
                    Some(slot) => deep_merge(slot, value),
                    None => {
                        b.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

/// Loads a TOML config and applies `--set key=value` overrides. Both the
/// file and the overrides may be partial: they are merged over the built-in
/// defaults. Dotted keys address nested tables; values parse as TOML scalars
/// and fall back to strings, so `--set relaxation=softmax` works unquoted.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<TrainConfig> {
    let mut value =
        toml::Value::try_from(TrainConfig::default()).expect("defaults serialize to TOML");
    if let Some(p) = path {
        let text = fs::read_to_string(p)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", p.display())))?;
        let file: toml::Value = text
            .parse()
            .map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?;
        deep_merge(&mut value, file);
    }
    for set in sets {
        apply_set(&mut value, set)?;
    }
    let config: TrainConfig = value
        .try_into()
        .map_err(|e| Error::Usage(format!("invalid config: {e}")))?;
    Ok(config)
}

fn apply_set(root: &mut toml::Value, entry: &str) -> Result<()> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got '{entry}'")))?;
    let parsed = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("--set key '{key}' has an empty segment")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("--set key '{key}' descends into a non-table")))?
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Usage(format!("--set key '{key}' descends into a non-table")))?
        .insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CorpusStats {
    pub count: usize,
    pub mean_mwp_tokens: f64,
    pub mean_equation_symbols: f64,
}

pub fn corpus_stats(examples: &[MaskedExample]) -> CorpusStats {
    let count = examples.len();
    let mwp: usize = examples.iter().map(|e| e.mwp_tokens.len()).sum();
    let eq: usize = examples.iter().map(|e| e.equation_symbols.len()).sum();
    CorpusStats {
        count,
        mean_mwp_tokens: mwp as f64 / count.max(1) as f64,
        mean_equation_symbols: eq as f64 / count.max(1) as f64,
    }
}

pub fn cmd_import(args: &ImportArgs) -> Result<serde_json::Value> {
    let raw = load_jsonl(&args.input)?;
    let masked: Vec<MaskedExample> = raw
        .iter()
        .map(preprocess)
        .collect::<Result<_>>()
        .map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", args.input.display())),
            other => other,
        })?;
    ensure_parent(&args.output)?;
    write_masked_jsonl(&args.output, &masked)?;

    let vocab = build_vocab(&masked, args.min_freq, &StopList::builtin())?;
    let vocab_path = args.vocab.clone().unwrap_or_else(|| {
        let mut name = args.output.as_os_str().to_owned();
        name.push(".vocab.json");
        PathBuf::from(name)
    });
    let mut vocab_bytes = serde_json::to_vec_pretty(&vocab)?;
    vocab_bytes.push(b'\n');
    atomic_write(&vocab_path, &vocab_bytes)?;

    let stats = corpus_stats(&masked);
    let mut manifest = RunManifest::begin("import");
    manifest.input(&args.input);
    manifest.output(&args.output).output(&vocab_path);
    manifest.finish(&args.output)?;

    Ok(serde_json::json!({
        "count": stats.count,
        "mean_mwp_tokens": stats.mean_mwp_tokens,
        "mean_equation_symbols": stats.mean_equation_symbols,
        "vocab_size": vocab.len(),
        "output": args.output.display().to_string(),
        "vocab": vocab_path.display().to_string(),
    }))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<serde_json::Value> {
    if args.n == 0 {
        return Err(Error::Usage("--n must be at least 1".into()));
    }
    let corpus = synth_corpus(args.n, args.seed);
    ensure_parent(&args.output)?;
    write_masked_jsonl(&args.output, &corpus)?;
    let stats = corpus_stats(&corpus);
    let mut manifest = RunManifest::begin("synth");
    manifest.seed = Some(args.seed);
    manifest.output(&args.output);
    manifest.finish(&args.output)?;
    Ok(serde_json::json!({
        "count": stats.count,
        "mean_mwp_tokens": stats.mean_mwp_tokens,
        "mean_equation_symbols": stats.mean_equation_symbols,
        "output": args.output.display().to_string(),
    }))
}

pub fn cmd_train(args: &TrainArgs) -> Result<serde_json::Value> {
    let config = load_config(args.config.as_deref(), &args.sets)?;
    let examples = load_masked_jsonl(&args.data)?;
    let vocab = build_vocab(&examples, args.min_freq, &StopList::builtin())?;
    let config = config.resolved(vocab.len());
    config.validate()?;

    fs::create_dir_all(&args.out_dir)?;
    let mut outcome = run_training(&examples, &vocab, &config, Some(&args.out_dir))?;
    let eval_outcome = train_eval_mwp2eq(&mut outcome.models, &examples)?;

    let ckpt_path = args.out_dir.join("model.ckpt");
    save_checkpoint(&ckpt_path, &outcome.models, outcome.steps)?;
    let log_path = args.out_dir.join("train_log.jsonl");
    let mut log_bytes = Vec::new();
    for line in &outcome.log {
        serde_json::to_writer(&mut log_bytes, line)?;
        log_bytes.push(b'\n');
    }
    atomic_write(&log_path, &log_bytes)?;

    let fingerprint = config_fingerprint(&config);
    let mut manifest = RunManifest::begin("train");
    manifest.seed = Some(config.seed);
    manifest.config_path = args.config.as_ref().map(|p| p.display().to_string());
    manifest.config = Some(config.clone());
    manifest.config_fingerprint = Some(fingerprint.clone());
    manifest.input(&args.data);
    manifest.output(&ckpt_path).output(&log_path);
    manifest.finish(&args.out_dir)?;

    Ok(serde_json::json!({
        "steps": outcome.steps,
        "final_loss": outcome.log.last().map(|l| l.total),
        "eval_parser_epochs": eval_outcome.epochs_run,
        "eval_parser_heldout_nll": eval_outcome.best_heldout_nll,
        "checkpoint": ckpt_path.display().to_string(),
        "log": log_path.display().to_string(),
        "config_fingerprint": fingerprint,
    }))
}

fn parse_mode(mode: &str) -> Result<Option<f64>> {
    if mode == "greedy" {
        return Ok(None);
    }
    match mode.parse::<f64>() {
        Ok(t) if t > 0.0 && t.is_finite() => Ok(Some(t)),
        _ => Err(Error::Usage(format!(
            "--mode must be 'greedy' or a positive temperature, got '{mode}'"
        ))),
    }
}

fn split_keywords(raw: &str) -> Vec<String> {
    raw.split(',')
        .flat_map(tokenize_mwp)
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<serde_json::Value> {
    if args.count == 0 {
        return Err(Error::Usage("--count must be at least 1".into()));
    }
    let temperature = parse_mode(&args.mode)?;
    let equation = tokenize_equation(&args.equation).map_err(|e| match e {
        Error::Data(m) => Error::Usage(format!("--equation: {m}")),
        other => other,
    })?;
    let keywords = split_keywords(&args.keywords);
    let (models, _) = load_checkpoint(&args.checkpoint)?;

    let input = generator_input(
        &models.vocab,
        &equation,
        &keywords,
        &[],
        models.generator.config.max_seq,
    );
    let context = &input.ids[..input.target_start];
    let opts = GenerateOptions {
        max_new: args.max_new,
        temperature,
    };
    let mut texts = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let mut stream = rng::substream(args.seed, &format!("generate.{i}"));
        let result = decode_tokens(
            &models.generator_store,
            &models.generator,
            context,
            &opts,
            &mut stream,
        );
        texts.push(models.vocab.decode(&result.ids).join(" "));
    }

    for text in &texts {
        println!("{text}");
    }
    if let Some(out) = &args.output {
        let mut bytes = texts.join("\n").into_bytes();
        bytes.push(b'\n');
        atomic_write(out, &bytes)?;
        let mut manifest = RunManifest::begin("generate");
        manifest.seed = Some(args.seed);
        manifest.config = Some(models.config.clone());
        manifest.config_fingerprint = Some(config_fingerprint(&models.config));
        manifest.input(&args.checkpoint);
        manifest.output(out);
        manifest.finish(out)?;
    }
    Ok(serde_json::json!({ "generated": texts.len() }))
}

pub fn cmd_select_keywords(args: &SelectKeywordsArgs) -> Result<serde_json::Value> {
    let (models, _) = load_checkpoint(&args.checkpoint)?;
    let tokens = tokenize_mwp(&args.mwp);
    if tokens.is_empty() {
        return Err(Error::Usage("--mwp is empty after tokenization".into()));
    }
    let dist = keyword_probs(&models.selector_store, &models.selector, &models.vocab, &tokens);
    let selected = select_keywords(&dist, SelectionMode::Threshold);
    let mut scored: Vec<(String, f64)> = dist
        .items
        .iter()
        .map(|item| (item.token.clone(), item.q))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(serde_json::json!({
        "keywords": selected,
        "scores": scored
            .iter()
            .map(|(t, q)| serde_json::json!({"token": t, "q": q}))
            .collect::<Vec<_>>(),
    }))
}

/// Shared evaluation protocol: for each held-out example, condition on its
/// equation plus the selector's threshold keywords, greedy-decode one MWP,
/// then score all metrics against the ground truth. `training_texts` feeds
/// the novelty metric.
pub fn evaluate_models(
    models: &Models,
    test: &[MaskedExample],
    training_texts: &[String],
    max_new: usize,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Data("empty evaluation split".into()));
    }
    let opts = GenerateOptions {
        max_new,
        temperature: None,
    };
    let mut candidates = Vec::with_capacity(test.len());
    let mut references = Vec::with_capacity(test.len());
    let mut equations = Vec::with_capacity(test.len());
    for example in test {
        let input = threshold_generator_input(models, example)?;
        let context = &input.ids[..input.target_start];
        let mut stream = rng::substream(models.config.seed, &format!("eval.{}", example.id));
        let result = decode_tokens(
            &models.generator_store,
            &models.generator,
            context,
            &opts,
            &mut stream,
        );
        candidates.push(models.vocab.decode(&result.ids));
        references.push(example.mwp_tokens.clone());
        equations.push(example.equation_text());
    }

    let max_seq = models.eval_parser.config.max_seq;
    let parse = |mwp: &[String]| -> Option<String> {
        let input = parser_input(&models.vocab, mwp, &[], max_seq);
        let context = &input.ids[..input.target_start];
        let mut stream = rng::substream(models.config.seed, "eval.parse");
        let opts = GenerateOptions {
            max_new,
            temperature: None,
        };
        let result = decode_tokens(
            &models.eval_store,
            &models.eval_parser,
            context,
            &opts,
            &mut stream,
        );
        if !result.hit_eos {
            return None; // decode overflow counts as a mismatch
        }
        let text = models.vocab.decode(&result.ids).join(" ");
        metrics::canonicalize_equation(&text).ok()
    };

    let candidate_texts: Vec<String> = candidates.iter().map(|c| c.join(" ")).collect();
    let report = MetricsReport {
        bleu4: metrics::bleu4(&candidates, &references)?,
        rouge_l: metrics::rouge_l_corpus(&candidates, &references)?,
        meteor_lite: metrics::meteor_lite_corpus(&candidates, &references)?,
        acc_eq: metrics::acc_eq_with(&candidates, &equations, parse)?,
        novelty_fraction: metrics::novelty(&candidate_texts, training_texts),
        dist3: metrics::dist_n(&candidates, 3),
        n_examples: test.len(),
        deviations: vec!["meteor_lite".to_string()],
        config_fingerprint: config_fingerprint(&models.config),
    };
    report.validate()?;
    Ok(report)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<serde_json::Value> {
    let (models, _) = load_checkpoint(&args.checkpoint)?;
    let test = load_masked_jsonl(&args.data)?;
    let training_texts: Vec<String> = match &args.train_data {
        Some(path) => load_masked_jsonl(path)?
            .iter()
            .map(|e| e.mwp_text())
            .collect(),
        None => test.iter().map(|e| e.mwp_text()).collect(),
    };
    let report = evaluate_models(&models, &test, &training_texts, args.max_new)?;
    let value = serde_json::to_value(&report)?;
    if let Some(out) = &args.output {
        let mut bytes = serde_json::to_vec_pretty(&report)?;
        bytes.push(b'\n');
        atomic_write(out, &bytes)?;
        let mut manifest = RunManifest::begin("evaluate");
        manifest.seed = Some(models.config.seed);
        manifest.config = Some(models.config.clone());
        manifest.config_fingerprint = Some(config_fingerprint(&models.config));
        manifest.input(&args.checkpoint).input(&args.data);
        manifest.output(out);
        manifest.finish(out)?;
    }
    Ok(value)
}

pub fn cmd_kfold(args: &KfoldArgs) -> Result<serde_json::Value> {
    let base_config = load_config(args.config.as_deref(), &args.sets)?;
    let examples = load_masked_jsonl(&args.data)?;
    let folds = kfold_split(examples.len(), args.k, base_config.seed)?;
    fs::create_dir_all(&args.out_dir)?;

    let mut reports = Vec::with_capacity(args.k);
    let mut fold_paths = Vec::with_capacity(args.k);
    for fold in 0..args.k {
        let train_idx = folds.train_indices(fold);
        let test_idx = folds.test_indices(fold);
        let train_set: Vec<MaskedExample> =
            train_idx.iter().map(|&i| examples[i].clone()).collect();
        let test_set: Vec<MaskedExample> = test_idx.iter().map(|&i| examples[i].clone()).collect();

        let vocab = build_vocab(&train_set, args.min_freq, &StopList::builtin())?;
        // distinct seed per fold, derived from the base seed
        let mut config = base_config.clone();
        config.seed = base_config.seed.wrapping_add(fold as u64);
        let mut outcome = run_training(&train_set, &vocab, &config, None)?;
        train_eval_mwp2eq(&mut outcome.models, &train_set)?;

        let train_texts: Vec<String> = train_set.iter().map(|e| e.mwp_text()).collect();
        let report = evaluate_models(&outcome.models, &test_set, &train_texts, args.max_new)?;
        let path = args.out_dir.join(format!("fold-{fold}.json"));
        let mut bytes = serde_json::to_vec_pretty(&report)?;
        bytes.push(b'\n');
        atomic_write(&path, &bytes)?;
        fold_paths.push(path);
        reports.push(report);
    }

    let k = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    let aggregate = serde_json::json!({
        "k": args.k,
        "fold_sizes": folds.sizes(),
        "mean": {
            "bleu4": mean(|r| r.bleu4),
            "rouge_l": mean(|r| r.rouge_l),
            "meteor_lite": mean(|r| r.meteor_lite),
            "acc_eq": mean(|r| r.acc_eq),
            "novelty_fraction": mean(|r| r.novelty_fraction),
            "dist3": mean(|r| r.dist3),
        },
        "folds": fold_paths
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>(),
    });
    let agg_path = args.out_dir.join("aggregate.json");
    let mut bytes = serde_json::to_vec_pretty(&aggregate)?;
    bytes.push(b'\n');
    atomic_write(&agg_path, &bytes)?;

    let mut manifest = RunManifest::begin("kfold");
    manifest.seed = Some(base_config.seed);
    manifest.config_path = args.config.as_ref().map(|p| p.display().to_string());
    manifest.config = Some(base_config.clone());
    manifest.config_fingerprint = Some(config_fingerprint(&base_config));
    manifest.input(&args.data);
    for path in &fold_paths {
        manifest.output(path);
    }
    manifest.output(&agg_path);
    manifest.finish(&args.out_dir)?;
    Ok(aggregate)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<serde_json::Value> {
    let entries = gradient_suite(args.seed);
    let mut failures = 0;
    println!("{:<28} {:>8} {:>12}  result", "check", "coords", "max_rel_err");
    for entry in &entries {
        let ok = entry.passes();
        if !ok {
            failures += 1;
        }
        println!(
            "{:<28} {:>8} {:>12.3e}  {}",
            entry.name,
            entry.report.checked,
            entry.report.max_rel_err,
            if ok { "pass" } else { "FAIL" }
        );
    }
    if failures > 0 {
        return Err(Error::Numerical(format!(
            "{failures} of {} gradient checks exceeded {SUITE_TOLERANCE:e}",
            entries.len()
        )));
    }
    Ok(serde_json::json!({
        "checks": entries.len(),
        "tolerance": SUITE_TOLERANCE,
        "all_pass": true,
    }))
}

/// Dispatches a parsed command; the summary JSON is printed by [`main_entry`].
pub fn run(command: &Command) -> Result<serde_json::Value> {
    match command {
        Command::Import(args) => cmd_import(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Generate(args) => cmd_generate(args),
        Command::SelectKeywords(args) => cmd_select_keywords(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Kfold(args) => cmd_kfold(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

/// Full process entry: parse, run, report. Returns the exit code.
pub fn main_entry<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version to stdout (exit 0) and usage errors
            // to stderr (exit 2)
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let name = cli.command.name();
    match run(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            let payload = serde_json::json!({
                "code": e.code_name(),
                "message": e.to_string(),
                "context": { "command": name, "exit_code": e.exit_code() },
            });
            eprintln!("{payload}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{self, to_raw};

    fn tiny_sets() -> Vec<String> {
        [
            "stage1_epochs=1",
            "stage2_epochs=1",
            "batch_size=4",
            "max_rollout_len=8",
            "eval_parser_epochs=2",
            "generator.d_model=16",
            "generator.n_layers=1",
            "generator.n_heads=2",
            "generator.d_ff=32",
            "generator.max_seq=96",
            "consistency_parser.d_model=16",
            "consistency_parser.n_layers=1",
            "consistency_parser.n_heads=2",
            "consistency_parser.d_ff=32",
            "consistency_parser.max_seq=96",
            "eval_parser.d_model=16",
            "eval_parser.n_layers=1",
            "eval_parser.n_heads=2",
            "eval_parser.d_ff=32",
            "eval_parser.max_seq=96",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }

    #[test]
    fn set_overrides_parse_types_and_reject_unknown_keys() {
        let config = load_config(
            None,
            &[
                "alpha=0.25".to_string(),
                "seed=9".to_string(),
                "relaxation=softmax".to_string(),
                "generator.d_model=64".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(config.alpha, 0.25);
        assert_eq!(config.seed, 9);
        assert_eq!(config.relaxation, crate::train::Relaxation::Softmax);
        assert_eq!(config.generator.d_model, 64);

        let err = load_config(None, &["no_such_field=1".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Usage(_)), "{err}");
        let err = load_config(None, &["alpha".to_string()]).unwrap_err();
        assert!(err.to_string().contains("KEY=VALUE"), "{err}");
    }

    #[test]
    fn config_file_plus_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        fs::write(&path, "alpha = 0.5\nbeta = 0.2\n").unwrap();
        let config = load_config(Some(&path), &["beta=0.7".to_string()]).unwrap();
        assert_eq!(config.alpha, 0.5);
        assert_eq!(config.beta, 0.7);
    }

    #[test]
    fn fingerprint_tracks_config_identity() {
        let a = TrainConfig::default();
        let mut b = TrainConfig::default();
        assert_eq!(config_fingerprint(&a), config_fingerprint(&b));
        b.alpha = 0.123;
        assert_ne!(config_fingerprint(&a), config_fingerprint(&b));
        assert_eq!(config_fingerprint(&a).len(), 64);
    }

    #[test]
    fn import_reports_stats_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let synth = synth_corpus(12, 3);
        let raws: Vec<corpus::RawExample> = synth.iter().map(|e| to_raw(e).unwrap()).collect();
        let raw_path = dir.path().join("raw.jsonl");
        corpus::write_jsonl(&raw_path, &raws).unwrap();

        let args = ImportArgs {
            input: raw_path.clone(),
            output: dir.path().join("masked.jsonl"),
            vocab: None,
            min_freq: 1,
        };
        let summary = cmd_import(&args).unwrap();
        assert_eq!(summary["count"], 12);
        assert!(summary["mean_mwp_tokens"].as_f64().unwrap() > 5.0);
        assert!(dir.path().join("masked.jsonl.vocab.json").exists());
        assert!(dir.path().join("masked.jsonl.manifest.json").exists());

        // deterministic: importing again produces identical bytes
        let first = fs::read(dir.path().join("masked.jsonl")).unwrap();
        cmd_import(&args).unwrap();
        let second = fs::read(dir.path().join("masked.jsonl")).unwrap();
        assert_eq!(first, second);

        let loaded = load_masked_jsonl(&args.output).unwrap();
        assert_eq!(loaded.len(), 12);
        assert_eq!(loaded[0].mwp_tokens, synth[0].mwp_tokens);
        assert_eq!(loaded[0].equation_symbols, synth[0].equation_symbols);
    }

    #[test]
    fn import_rejects_missing_and_empty_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let args = ImportArgs {
            input: dir.path().join("absent.jsonl"),
            output: dir.path().join("out.jsonl"),
            vocab: None,
            min_freq: 1,
        };
        assert!(cmd_import(&args).is_err());
        fs::write(dir.path().join("absent.jsonl"), "").unwrap();
        let err = cmd_import(&args).unwrap_err().to_string();
        assert!(err.contains("no examples"), "{err}");
    }

    #[test]
    fn full_pipeline_train_generate_select_evaluate() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("corpus.jsonl");
        cmd_synth(&SynthArgs {
            n: 12,
            seed: 1,
            output: data.clone(),
        })
        .unwrap();

        let out_dir = dir.path().join("run");
        let train_args = TrainArgs {
            config: None,
            sets: tiny_sets(),
            data: data.clone(),
            out_dir: out_dir.clone(),
            min_freq: 1,
        };
        let summary = cmd_train(&train_args).unwrap();
        let ckpt = out_dir.join("model.ckpt");
        assert!(ckpt.exists());
        assert!(out_dir.join("train_log.jsonl").exists());
        assert!(out_dir.join("manifest.json").exists());
        assert!(summary["steps"].as_u64().unwrap() > 0);
        // per-epoch checkpoints: one for each of the two stages' single epochs
        assert!(out_dir.join("epoch-000.ckpt").exists());
        assert!(out_dir.join("epoch-001.ckpt").exists());

        // the training log is valid JSONL with the documented keys
        let log = fs::read_to_string(out_dir.join("train_log.jsonl")).unwrap();
        let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        for key in ["step", "stage", "L_LM", "L_eq", "L_c", "total"] {
            assert!(first.get(key).is_some(), "log line missing {key}");
        }

        let gen = cmd_generate(&GenerateArgs {
            checkpoint: ckpt.clone(),
            equation: "x = ( num1 + num2 )".to_string(),
            keywords: "game, marbles".to_string(),
            mode: "greedy".to_string(),
            count: 2,
            max_new: 20,
            seed: 0,
            output: Some(dir.path().join("gen.txt")),
        })
        .unwrap();
        assert_eq!(gen["generated"], 2);
        assert!(dir.path().join("gen.txt").exists());
        assert!(dir.path().join("gen.txt.manifest.json").exists());

        let bad = cmd_generate(&GenerateArgs {
            checkpoint: ckpt.clone(),
            equation: "x = num1 $ num2".to_string(),
            keywords: String::new(),
            mode: "greedy".to_string(),
            count: 1,
            max_new: 10,
            seed: 0,
            output: None,
        })
        .unwrap_err();
        assert!(bad.to_string().contains('$'), "{bad}");

        let kw = cmd_select_keywords(&SelectKeywordsArgs {
            checkpoint: ckpt.clone(),
            mwp: "sam had num1 red marbles in the game".to_string(),
        })
        .unwrap();
        assert!(kw["scores"].as_array().unwrap().len() > 0);

        let report_path = dir.path().join("report.json");
        let eval = cmd_evaluate(&EvaluateArgs {
            checkpoint: ckpt,
            data: data.clone(),
            train_data: None,
            max_new: 20,
            output: Some(report_path.clone()),
        })
        .unwrap();
        let report: MetricsReport =
            serde_json::from_slice(&fs::read(&report_path).unwrap()).unwrap();
        report.validate().unwrap();
        assert_eq!(report.n_examples, 12);
        assert_eq!(eval["n_examples"], 12);
        assert!(report_path.with_file_name("report.json.manifest.json").exists());
    }

    #[test]
    fn train_is_bit_identical_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("corpus.jsonl");
        cmd_synth(&SynthArgs {
            n: 8,
            seed: 2,
            output: data.clone(),
        })
        .unwrap();
        let run = |out: &Path| {
            cmd_train(&TrainArgs {
                config: None,
                sets: tiny_sets(),
                data: data.clone(),
                out_dir: out.to_path_buf(),
                min_freq: 1,
            })
            .unwrap();
            fs::read(out.join("model.ckpt")).unwrap()
        };
        let a = run(&dir.path().join("a"));
        let b = run(&dir.path().join("b"));
        assert_eq!(a, b, "checkpoints differ across identical runs");
    }

    #[test]
    fn kfold_writes_reports_and_aggregate() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("corpus.jsonl");
        cmd_synth(&SynthArgs {
            n: 9,
            seed: 3,
            output: data.clone(),
        })
        .unwrap();
        let out_dir = dir.path().join("folds");
        let mut sets = tiny_sets();
        sets.push("stage2_epochs=0".to_string());
        let aggregate = cmd_kfold(&KfoldArgs {
            config: None,
            sets,
            data,
            k: 3,
            out_dir: out_dir.clone(),
            min_freq: 1,
            max_new: 16,
        })
        .unwrap();
        assert_eq!(aggregate["k"], 3);
        for fold in 0..3 {
            assert!(out_dir.join(format!("fold-{fold}.json")).exists());
        }
        assert!(out_dir.join("aggregate.json").exists());
        assert!(out_dir.join("manifest.json").exists());
        let mean = aggregate["mean"]["bleu4"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&mean));
    }

    #[test]
    fn main_entry_reports_errors_as_json_exit_codes() {
        // usage error from clap
        assert_eq!(main_entry(["mwpgen", "no-such-command"]), 2);
        // help exits 0
        assert_eq!(main_entry(["mwpgen", "--help"]), 0);
        // data error: missing input file
        let code = main_entry([
            "mwpgen",
            "import",
            "--input",
            "/nonexistent/raw.jsonl",
            "--output",
            "/tmp/unused-mwpgen-test.jsonl",
        ]);
        assert_eq!(code, 3);
    }

    #[test]
    fn manifest_fingerprint_matches_resolved_config() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("corpus.jsonl");
        cmd_synth(&SynthArgs {
            n: 8,
            seed: 4,
            output: data.clone(),
        })
        .unwrap();
        let out_dir = dir.path().join("run");
        let mut sets = tiny_sets();
        sets.push("stage2_epochs=0".to_string());
        cmd_train(&TrainArgs {
            config: None,
            sets,
            data,
            out_dir: out_dir.clone(),
            min_freq: 1,
        })
        .unwrap();
        let manifest: RunManifest =
            serde_json::from_slice(&fs::read(out_dir.join("manifest.json")).unwrap()).unwrap();
        let config = manifest.config.expect("train manifest embeds the config");
        assert_eq!(
            manifest.config_fingerprint.unwrap(),
            config_fingerprint(&config)
        );
        assert_eq!(manifest.command, "train");
        assert_eq!(manifest.tool_version, TOOL_VERSION);
    }
}
