//! Run orchestration and the output directory layout.
//!
//! ```text
//! <out>/manifest.json      config echo, store checksums, backend tag, version, timing
//! <out>/predictions.jsonl  one PredictionRecord per sample, sorted by test id
//! <out>/scores.jsonl       per-sample soft accuracy (when scoring)
//! <out>/summary.json       counts and failure rates; deterministic for a given manifest
//! <out>/replay.log         request/response pairs, sorted by correlation id
//! <out>/prompts/           dry-run prompt dumps
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tracing::info;

use crate::backend::replay::{RecordingBackend, ReplayBackend};
use crate::backend::Backend;
use crate::config::RunConfig;
use crate::embedding_store::{Store, StoreManifest};
use crate::ensemble::PredictionRecord;
use crate::error::{Error, Result};
use crate::jsonl::{read_jsonl, sha256_hex, write_json, write_jsonl};
use crate::pipeline::{Pipeline, PipelineConfig, Prepared, RunOutput};
use crate::prompt_builder::PromptBundle;
use crate::shot_selector::{NeighborFile, Strategy};
use crate::vqa_eval::{evaluate, EvalItem, EvalSummary, MetricVariant, SampleScore, SkippedSample};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPLAY_FILE: &str = "replay.log";
pub const PROMPTS_DIR: &str = "prompts";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub store: StoreManifest,
    pub backend_tag: String,
    pub token_counter: String,
    /// SHA-256 of the serialized config, store fingerprint and backend tag.
    pub run_fingerprint: String,
    /// Not part of the fingerprint.
    pub timing: Timing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_samples: usize,
    pub n_predicted: usize,
    pub n_failed: usize,
    pub n_skipped: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<SkippedSample>,
    pub queries_total: usize,
    pub queries_failed: usize,
    pub query_failure_rate: f64,
    /// Successful queries that produced an empty answer.
    pub empty_answers: usize,
    pub effective_n_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degradations: Vec<String>,
    pub pipeline: PipelineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSummary>,
}

impl RunSummary {
    fn from_output(out: &RunOutput, n_samples: usize, pipeline: PipelineConfig) -> Self {
        let queries_total: usize = out.predictions.iter().map(|p| p.raw_generations.len()).sum();
        let queries_failed: usize = out.predictions.iter().map(|p| p.failed_queries).sum();
        Self {
            n_samples,
            n_predicted: out.predictions.iter().filter(|p| !p.is_failed()).count(),
            n_failed: out.predictions.iter().filter(|p| p.is_failed()).count(),
            n_skipped: out.skipped.len(),
            skipped: out.skipped.clone(),
            queries_total,
            queries_failed,
            query_failure_rate: if queries_total == 0 {
                0.0
            } else {
                queries_failed as f64 / queries_total as f64
            },
            empty_answers: out.predictions.iter().map(|p| p.empty_answers()).sum(),
            effective_n_mean: out.effective_n_mean(),
            degradations: out.degradations.clone(),
            pipeline,
            eval: None,
        }
    }
}

pub fn load_store(cfg: &RunConfig) -> Result<Store> {
    let (train, test, emb) = cfg.store.require()?;
    Store::ingest(train, test, emb)
}

fn load_neighbors(cfg: &RunConfig, strategy: Strategy) -> Result<Option<NeighborFile>> {
    match (&cfg.store.neighbors, strategy) {
        (Some(path), _) => Ok(Some(NeighborFile::load(path)?)),
        (None, Strategy::Precomputed) => Err(Error::input("precomputed strategy needs a neighbor file (--neighbors)")),
        (None, _) => Ok(None),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn fingerprint(cfg: &RunConfig, store: &StoreManifest, backend_tag: &str) -> Result<String> {
    let cfg_json = serde_json::to_string(cfg)?;
    Ok(sha256_hex(
        format!("{cfg_json}\n{}\n{backend_tag}", store.fingerprint).as_bytes(),
    ))
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    cfg: &RunConfig,
    store: &Store,
    backend_tag: &str,
    token_counter: &str,
    started: Instant,
) -> Result<()> {
    let manifest = RunManifest {
        tool: "kbvqa".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        config: cfg.clone(),
        store: store.manifest.clone(),
        backend_tag: backend_tag.into(),
        token_counter: token_counter.into(),
        run_fingerprint: fingerprint(cfg, &store.manifest, backend_tag)?,
        timing: Timing {
            wall_time_s: started.elapsed().as_secs_f64(),
        },
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)
}

/// Items the evaluator needs, taken from the store's test split.
pub fn eval_items(store: &Store) -> Vec<EvalItem> {
    store
        .test
        .iter()
        .map(|t| EvalItem {
            id: t.id.clone(),
            human_answers: t.human_answers.clone(),
            question_type: t.question_type.clone(),
        })
        .collect()
}

/// Ingests, runs the pipeline against `backend` and writes the output directory.
pub fn run(cfg: &RunConfig, out_dir: &Path, backend: Arc<dyn Backend>, command: &str) -> Result<RunSummary> {
    let started = Instant::now();
    let store = load_store(cfg)?;
    run_with_store(cfg, &store, out_dir, backend, command, started)
}

pub fn run_with_store(
    cfg: &RunConfig,
    store: &Store,
    out_dir: &Path,
    backend: Arc<dyn Backend>,
    command: &str,
    started: Instant,
) -> Result<RunSummary> {
    let pcfg = cfg.pipeline_config()?;
    let neighbors = load_neighbors(cfg, pcfg.strategy)?;
    let mut pipeline = Pipeline::new(store, pcfg.clone())?;
    if let Some(n) = &neighbors {
        pipeline = pipeline.with_neighbors(n);
    }
    if let Some(counter) = backend.token_counter() {
        pipeline = pipeline.with_token_counter(counter);
    }
    let samples = pipeline.samples(cfg.run.limit);

    let recorder = Arc::new(RecordingBackend::new(backend.clone()));
    let active: &dyn Backend = if cfg.run.record_replay {
        recorder.as_ref()
    } else {
        backend.as_ref()
    };
    let output = pipeline.run(&samples, active, cfg.run.jobs)?;

    create_dir(out_dir)?;
    write_jsonl(&out_dir.join(PREDICTIONS_FILE), &output.predictions)?;
    let mut summary = RunSummary::from_output(&output, samples.len(), pcfg.clone());
    if cfg.run.score {
        let wanted: std::collections::HashSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
        let items: Vec<EvalItem> = eval_items(store)
            .into_iter()
            .filter(|i| wanted.contains(i.id.as_str()))
            .collect();
        let (scores, eval) = evaluate(&output.predictions, &items, pcfg.metric)?;
        write_jsonl(&out_dir.join(SCORES_FILE), &scores)?;
        summary.eval = Some(eval);
    }
    write_json(&out_dir.join(SUMMARY_FILE), &summary)?;
    if cfg.run.record_replay {
        recorder.write(&out_dir.join(REPLAY_FILE))?;
    }
    write_manifest(
        out_dir,
        command,
        cfg,
        store,
        &backend.tag(),
        &pipeline.token_counter_name(),
        started,
    )?;
    info!(
        predicted = summary.n_predicted,
        failed = summary.n_failed,
        skipped = summary.n_skipped,
        "run finished"
    );
    Ok(summary)
}

/// Re-runs a configuration against a recorded replay log, without network.
pub fn replay(cfg: &RunConfig, out_dir: &Path, log: &Path) -> Result<RunSummary> {
    let backend: Arc<dyn Backend> = Arc::new(ReplayBackend::load(log)?);
    let mut cfg = cfg.clone();
    // The log is an input here; rewriting it next to the outputs would be redundant.
    cfg.run.record_replay = false;
    run(&cfg, out_dir, backend, "replay")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptDumpSummary {
    pub n_samples: usize,
    pub n_bundles: usize,
    pub n_skipped: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<SkippedSample>,
    pub effective_n_mean: Option<f64>,
}

/// Dry run: renders all prompts without a backend. Writes
/// `prompts/bundles.jsonl` plus one text file per prompt.
pub fn build_prompts(
    cfg: &RunConfig,
    out_dir: &Path,
    token_counter_from: Option<&dyn Backend>,
) -> Result<Vec<PromptBundle>> {
    let started = Instant::now();
    let store = load_store(cfg)?;
    let pcfg = cfg.pipeline_config()?;
    let neighbors = load_neighbors(cfg, pcfg.strategy)?;
    let mut pipeline = Pipeline::new(&store, pcfg)?;
    if let Some(n) = &neighbors {
        pipeline = pipeline.with_neighbors(n);
    }
    if let Some(counter) = token_counter_from.and_then(|b| b.token_counter()) {
        pipeline = pipeline.with_token_counter(counter);
    }
    let samples = pipeline.samples(cfg.run.limit);
    let prepared = pipeline.prepare_all(&samples)?;

    let prompts_dir = out_dir.join(PROMPTS_DIR);
    create_dir(&prompts_dir)?;
    let mut bundles = Vec::new();
    let mut skipped = Vec::new();
    for p in prepared {
        match p {
            Prepared::Ready(b) => bundles.push(b),
            Prepared::Skipped(s) => skipped.push(s),
        }
    }
    for b in &bundles {
        for (j, prompt) in b.prompts.iter().enumerate() {
            let path = prompts_dir.join(format!("{}.{j}.txt", sanitize(&b.test_id)));
            std::fs::write(&path, prompt).map_err(|e| Error::io(&path, e))?;
        }
    }
    write_jsonl(&prompts_dir.join("bundles.jsonl"), &bundles)?;
    let effective: Vec<f64> = bundles
        .iter()
        .map(|b| {
            let e = b.effective_n();
            e.iter().sum::<usize>() as f64 / e.len().max(1) as f64
        })
        .collect();
    let summary = PromptDumpSummary {
        n_samples: samples.len(),
        n_bundles: bundles.len(),
        n_skipped: skipped.len(),
        skipped,
        effective_n_mean: (!effective.is_empty()).then(|| effective.iter().sum::<f64>() / effective.len() as f64),
    };
    write_json(&out_dir.join(SUMMARY_FILE), &summary)?;
    write_manifest(
        out_dir,
        "build-prompts",
        cfg,
        &store,
        "none",
        &pipeline.token_counter_name(),
        started,
    )?;
    Ok(bundles)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Scores a predictions file against a test dataset file. Writes
/// `scores.jsonl` and `summary.json` into `out_dir` when given.
pub fn eval_files(
    predictions: &Path,
    dataset: &Path,
    metric: MetricVariant,
    out_dir: Option<&Path>,
) -> Result<(Vec<SampleScore>, EvalSummary)> {
    let preds: Vec<PredictionRecord> = read_jsonl(predictions)?;
    let items: Vec<EvalItem> = read_jsonl(dataset)?;
    let (scores, summary) = evaluate(&preds, &items, metric)?;
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        write_jsonl(&dir.join(SCORES_FILE), &scores)?;
        write_json(&dir.join(SUMMARY_FILE), &summary)?;
    }
    Ok((scores, summary))
}

/// Default output directory when none is given.
pub fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}
