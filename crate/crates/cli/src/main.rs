//! `cqg`: consecutive question generation from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{info, warn};

use cqg_core::apps::augment::{merge_records, synthesize_corpus};
use cqg_core::apps::config::EngineConfig;
use cqg_core::apps::docnli::{docnli_entail, NliVerdict};
use cqg_core::apps::f1::{evaluate, AnswerRecord};
use cqg_core::apps::io::{read_jsonl, write_jsonl};
use cqg_core::apps::AppError;
use cqg_core::composer::build_training_records;
use cqg_core::search::{search, SearchError, TraceRow};
use cqg_core::{AnnotatedStory, Story};

#[derive(Parser)]
#[command(name = "cqg", version, about = "Consecutive question generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build shuffled multitask training records from an annotated corpus.
    PrepareData {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic Q-A flow for every passage.
    Generate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Original dataset to merge with the synthetic records.
        #[arg(long)]
        merge: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Zero-shot entailment of premise/hypothesis pairs.
    Docnli {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Mean token F1 of predicted answers against gold answers.
    EvalF1 {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Dump the per-step beam of the search for every passage.
    Trace {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Deserialize)]
struct PairInput {
    #[serde(default)]
    id: Option<String>,
    premise: String,
    hypothesis: String,
}

#[derive(Serialize)]
struct VerdictRow {
    id: String,
    #[serde(flatten)]
    verdict: NliVerdict,
}

fn load_config(path: Option<&Path>) -> Result<EngineConfig> {
    let cfg = match path {
        Some(p) => EngineConfig::load(p)?,
        None => EngineConfig::default(),
    };
    Ok(cfg.with_env(|k| std::env::var(k).ok()))
}

fn prepare_data(input: &Path, out: &Path, seed: u64) -> Result<()> {
    let corpus: Vec<AnnotatedStory> = read_jsonl(input)?;
    let records = build_training_records(&corpus, seed)?;
    write_jsonl(out, &records)?;
    info!(stories = corpus.len(), records = records.len(), "training records written");
    Ok(())
}

fn generate(input: &Path, out: &Path, merge: Option<&Path>, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let search_cfg = cfg.search_config()?;
    let backend = cfg.backend()?;
    let passages: Vec<AnnotatedStory> = read_jsonl(input)?;
    let output = synthesize_corpus(&passages, &search_cfg, &backend, cfg.workers())?;
    match merge {
        Some(orig) => {
            let original: Vec<Value> = read_jsonl(orig)?;
            write_jsonl(out, &merge_records(&original, &output.records)?)?;
        }
        None => write_jsonl(out, &output.records)?,
    }
    info!(records = output.records.len(), failed = output.failed.len(), "synthetic corpus written");
    Ok(())
}

fn docnli(input: &Path, out: &Path, threshold: Option<f64>, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let mut nli_cfg = cfg.docnli_config()?;
    if let Some(t) = threshold {
        nli_cfg.threshold = t;
    }
    let backend = cfg.backend()?;
    let pairs: Vec<PairInput> = read_jsonl(input)?;
    let mut rows = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let id = p.id.clone().unwrap_or_else(|| i.to_string());
        let verdict = docnli_entail(&p.premise, &p.hypothesis, &nli_cfg, &backend)
            .with_context(|| format!("pair {id}"))?;
        rows.push(VerdictRow { id, verdict });
    }
    write_jsonl(out, &rows)?;
    Ok(())
}

fn eval_f1(pred: &Path, gold: &Path) -> Result<()> {
    let pred: Vec<AnswerRecord> = read_jsonl(pred)?;
    let gold: Vec<AnswerRecord> = read_jsonl(gold)?;
    let report = evaluate(&pred, &gold);
    if !report.missing.is_empty() {
        warn!(missing = report.missing.len(), "gold ids without a prediction count as 0");
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn trace(input: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let search_cfg = cfg.search_config()?;
    let backend = cfg.backend()?;
    let passages: Vec<AnnotatedStory> = read_jsonl(input)?;
    let mut rows: Vec<TraceRow> = Vec::new();
    let mut failed = 0;
    for p in &passages {
        let story = Arc::new(Story::new(p.id.clone(), p.story.clone())?);
        match search(story, &search_cfg, &backend) {
            Ok(res) => rows.extend(res.trace),
            Err(SearchError::NoCompleteFlow { best_partial }) => rows.extend(best_partial.trace),
            Err(e) => {
                warn!(story = %p.id, error = %e, "passage failed");
                failed += 1;
            }
        }
    }
    if !passages.is_empty() && failed == passages.len() {
        return Err(AppError::AllPassagesFailed(failed).into());
    }
    write_jsonl(out, &rows)?;
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    let result = match &cli.command {
        Command::PrepareData { input, out, seed } => prepare_data(input, out, *seed),
        Command::Generate { input, out, merge, config } => generate(input, out, merge.as_deref(), config.as_deref()),
        Command::Docnli { input, out, threshold, config } => docnli(input, out, *threshold, config.as_deref()),
        Command::EvalF1 { pred, gold } => eval_f1(pred, gold),
        Command::Trace { input, out, config } => trace(input, out, config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
