use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ctxopt::archive::sha256_hex;
use ctxopt::classifier::{EnsembleMode, Temperature};
use ctxopt::data::{make_synthetic, FeatureDataset, SynthConfig};
use ctxopt::encoder::{EncoderConfig, EncoderWeights};
use ctxopt::experiment::{self, ExperimentSpec};
use ctxopt::interpret::nearest_words;
use ctxopt::prompt::{ClassNameTable, ContextBank};
use ctxopt::tokenizer::{Vocabulary, DEFAULT_VOCAB_SIZE};
use ctxopt::train::{evaluate, zero_shot_logits, Method};
use ctxopt::words::{default_corpus, DEFAULT_TEMPLATE};
use ctxopt::{Error, Result};

/// Learned prompt contexts for a frozen text encoder.
#[derive(Parser)]
#[command(name = "ctxopt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature dataset.
    Synth(SynthArgs),
    /// Validate a feature file and write a canonical copy.
    Ingest {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a byte-level BPE vocabulary.
    Vocab {
        /// One document per line; the bundled corpus is used when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write seeded encoder weights for a vocabulary.
    InitEncoder(InitEncoderArgs),
    /// Run an experiment spec.
    Run(RunArgs),
    /// Test accuracy of a learned context or of hand-crafted templates.
    Eval(EvalArgs),
    /// Nearest vocabulary words for each learned context vector.
    Interpret {
        #[arg(long)]
        context: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long, default_value_t = 5)]
        top_n: usize,
        /// Emit JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Turn a results.csv into accuracy-vs-shots points (mean and std over seeds).
    ExportPlotCsv {
        results: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 32)]
    train_per_class: usize,
    #[arg(long, default_value_t = 8)]
    val_per_class: usize,
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0.3)]
    margin: f32,
    #[arg(long, default_value_t = 0.15)]
    noise: f32,
    /// Falls back to CTXOPT_SEED, then 1.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InitEncoderArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Falls back to CTXOPT_SEED, then 1.
    #[arg(long)]
    seed: Option<u64>,
    /// Unset sizes take the default config (2 layers, 4 heads, width 64, 32-d output, 32 positions).
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    context_length: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment spec (.json or .toml).
    spec: PathBuf,
    /// Validate inputs and print the plan without training.
    #[arg(long)]
    dry_run: bool,
    /// Cells run concurrently.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Comma-separated, e.g. coop,zeroshot,linear-probe.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',')]
    shots: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    allow_any_shots: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    encoder: PathBuf,
    /// Learned context checkpoint; without it, templates are evaluated zero-shot.
    #[arg(long, conflicts_with = "template")]
    context: Option<PathBuf>,
    /// Repeat to ensemble several templates.
    #[arg(long)]
    template: Vec<String>,
    #[arg(long, value_enum, default_value = "embedding")]
    ensemble_mode: ModeArg,
    #[arg(long, default_value_t = 0.01)]
    temperature: f32,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Embedding,
    Logit,
}

fn env_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("CTXOPT_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("CTXOPT_SEED must be an unsigned integer, got '{v}'"))),
        Err(_) => Ok(1),
    }
}

fn file_sha(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

fn print(v: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&v).expect("json value"));
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        classes: a.classes,
        dim: a.dim,
        train_per_class: a.train_per_class,
        val_per_class: a.val_per_class,
        test_per_class: a.test_per_class,
        margin: a.margin,
        noise: a.noise,
        seed: env_seed(a.seed)?,
    };
    let syn = make_synthetic(&cfg)?;
    syn.dataset.save(&a.out)?;
    print(json!({
        "out": a.out,
        "sha256": file_sha(&a.out)?,
        "samples": syn.dataset.len(),
        "classes": syn.dataset.class_names(),
        "splits": syn.dataset.splits(),
        "config": cfg,
    }));
    Ok(())
}

fn ingest(input: &Path, out: &Path) -> Result<()> {
    let ds = FeatureDataset::load(input)?;
    ds.save(out)?;
    print(json!({
        "out": out,
        "sha256": file_sha(out)?,
        "features_sha256": ds.checksum(),
        "samples": ds.len(),
        "dim": ds.dim(),
        "classes": ds.class_names(),
        "splits": ds.splits(),
    }));
    Ok(())
}

fn vocab(corpus: Option<PathBuf>, size: usize, out: &Path) -> Result<()> {
    let docs: Vec<String> = match corpus {
        Some(p) => std::fs::read_to_string(&p)
            .map_err(|e| Error::Config(format!("cannot read corpus {}: {e}", p.display())))?
            .lines()
            .map(str::to_string)
            .collect(),
        None => default_corpus(),
    };
    let v = Vocabulary::build(&docs, size)?;
    v.save(out)?;
    print(json!({ "out": out, "sha256": file_sha(out)?, "tokens": v.len(), "merges": v.merges().len() }));
    Ok(())
}

fn init_encoder(a: InitEncoderArgs) -> Result<()> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let d = EncoderConfig::default();
    let cfg = EncoderConfig {
        layers: a.layers.unwrap_or(d.layers),
        heads: a.heads.unwrap_or(d.heads),
        width: a.width.unwrap_or(d.width),
        embed_dim: a.embed_dim.unwrap_or(d.embed_dim),
        context_length: a.context_length.unwrap_or(d.context_length),
        vocab_size: vocab.len(),
        ..d
    };
    let seed = env_seed(a.seed)?;
    let w = EncoderWeights::init_frozen(&cfg, seed)?;
    w.save(&a.out)?;
    print(json!({
        "out": a.out,
        "sha256": file_sha(&a.out)?,
        "parameters": w.parameter_count(),
        "config": cfg,
        "seed": seed,
    }));
    Ok(())
}

fn run(a: RunArgs) -> Result<bool> {
    let mut spec = ExperimentSpec::load(&a.spec)?;
    if let Some(j) = a.jobs {
        spec.jobs = j;
    }
    if let Some(o) = a.output_dir {
        spec.output_dir = o;
    }
    if let Some(m) = a.methods {
        spec.methods = m;
    }
    if let Some(s) = a.shots {
        spec.shots = s;
    }
    if let Some(s) = a.seeds {
        spec.seeds = s;
    }
    spec.allow_any_shots |= a.allow_any_shots;
    let plan = experiment::plan(spec)?;
    if a.dry_run {
        print(json!({
            "dry_run": true,
            "spec_hash": plan.spec_hash,
            "run_dir": plan.run_dir(),
            "cells": plan.cells,
        }));
        return Ok(true);
    }
    let summary = experiment::execute(&plan)?;
    print!("{}", summary.csv);
    let failed: Vec<_> = summary.failures().collect();
    for f in &failed {
        log::error!(
            "cell {} shots={} seed={} failed: {}",
            f.cell.method,
            f.cell.shots,
            f.cell.seed,
            f.error.as_deref().unwrap_or("")
        );
    }
    eprintln!("results in {}", summary.run_dir.display());
    Ok(failed.is_empty())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ds = FeatureDataset::load(&a.dataset)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let encoder = EncoderWeights::load(&a.encoder)?;
    encoder.check_vocab(&vocab)?;
    let tau = Temperature::new(a.temperature)?;
    let accuracy = match &a.context {
        Some(path) => {
            let (bank, names) = ContextBank::load(path)?;
            if names != ds.class_names() {
                return Err(Error::Data("checkpoint class names differ from the dataset's".into()));
            }
            let table = ClassNameTable::new(&names, &vocab)?;
            evaluate(&bank.class_features(&table, &encoder)?, &ds, tau)?
        }
        None => {
            let templates: Vec<String> = if a.template.is_empty() {
                vec![ds.template().unwrap_or(DEFAULT_TEMPLATE).to_string()]
            } else {
                a.template.clone()
            };
            let refs: Vec<&str> = templates.iter().map(String::as_str).collect();
            let mode = match a.ensemble_mode {
                ModeArg::Embedding => EnsembleMode::Embedding,
                ModeArg::Logit => EnsembleMode::Logit,
            };
            let logits = zero_shot_logits(&ds, &encoder, &vocab, &refs, mode, tau)?;
            let (_, labels) = ds.gather(ds.test_indices());
            ctxopt::train::accuracy(&logits, &labels)
        }
    };
    print(json!({ "accuracy": accuracy, "test_samples": ds.splits().test }));
    Ok(())
}

fn interpret(context: &Path, vocab: &Path, encoder: &Path, top_n: usize, as_json: bool) -> Result<()> {
    let (bank, names) = ContextBank::load(context)?;
    let vocab = Vocabulary::load(vocab)?;
    let encoder = EncoderWeights::load(encoder)?;
    let report = nearest_words(&bank, &names, &encoder.token_embedding, &vocab, top_n)?;
    if as_json {
        println!("{}", report.to_json()?);
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn export_plot_csv(results: &Path, out: Option<PathBuf>) -> Result<()> {
    let text = std::fs::read_to_string(results)?;
    let csv = experiment::render_curve_csv(&experiment::curve_points(&text)?);
    match out {
        Some(p) => std::fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Synth(a) => synth(a)?,
        Command::Ingest { input, out } => ingest(&input, &out)?,
        Command::Vocab { corpus, size, out } => vocab(corpus, size, &out)?,
        Command::InitEncoder(a) => init_encoder(a)?,
        Command::Run(a) => return run(a),
        Command::Eval(a) => eval(a)?,
        Command::Interpret {
            context,
            vocab,
            encoder,
            top_n,
            json,
        } => interpret(&context, &vocab, &encoder, top_n, json)?,
        Command::ExportPlotCsv { results, out } => export_plot_csv(&results, out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn explicit_seed_wins() {
        assert_eq!(env_seed(Some(7)).unwrap(), 7);
    }
}
