use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use kbvqa_core::backend::{BackendKind, MockMode};
use kbvqa_core::config::RunConfig;
use kbvqa_core::pipeline::CaptionSource;

#[derive(Debug, Parser)]
#[command(name = "kbvqa", version, about = "Few-shot in-context knowledge-based VQA runner")]
pub struct Cli {
    /// Log verbosity on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate the dataset and embeddings and write a normalized copy.
    Ingest(Common),
    /// Rank candidate captions per test sample and keep the top m.
    RankCaptions(Common),
    /// Rank in-context examples and split them into k shot sets.
    SelectShots(Common),
    /// Render every prompt without querying a backend.
    BuildPrompts(Common),
    /// Query the backend, vote, and write predictions.
    Run(RunArgs),
    /// Score a predictions file against a dataset.
    Eval(EvalArgs),
    /// Sweep one parameter and write an accuracy curve.
    Ablate(AblateArgs),
    /// Re-run a configuration from a recorded replay log.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    /// Score predictions against the test split in the same run.
    #[arg(long)]
    pub score: bool,
    /// Do not write replay.log.
    #[arg(long)]
    pub no_replay_log: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub predictions: PathBuf,
    /// Test JSONL with human answers; defaults to the configured test split.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Use min(matches/3, 1) instead of the leave-one-out average.
    #[arg(long)]
    pub direct_metric: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// m, n, k, strategy or caption_type.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated values, e.g. 1,3,5,7,9.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    /// Also write sweep.svg.
    #[arg(long)]
    pub svg: bool,
    /// Recompute shot rankings at every point.
    #[arg(long)]
    pub no_cache: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub log: PathBuf,
}

/// Flags shared by every subcommand; each overrides the matching config key.
#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Embedding JSON, or the `.index.json` of a binary table.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Neighbor JSONL for the precomputed strategy.
    #[arg(long)]
    pub neighbors: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// avg_sim, random, random(seed=N) or precomputed.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Shots per prompt.
    #[arg(long)]
    pub n: Option<usize>,
    /// Captions per example.
    #[arg(long)]
    pub m: Option<usize>,
    /// Prompts per sample.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// question_informative or generic.
    #[arg(long)]
    pub caption_type: Option<CaptionSource>,
    /// Only the first N test samples by id.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Samples processed in parallel.
    #[arg(long)]
    pub jobs: Option<usize>,

    #[arg(long, value_parser = parse_kind)]
    pub backend: Option<BackendKind>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    #[arg(long)]
    pub retries: Option<u32>,
    #[arg(long)]
    pub max_concurrency: Option<usize>,
    #[arg(long)]
    pub beam_size: Option<usize>,
    /// scripted, lookup or echo_hash.
    #[arg(long, value_parser = parse_mock_mode)]
    pub mock_mode: Option<MockMode>,
    #[arg(long)]
    pub mock_data: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<BackendKind, String> {
    match s {
        "http" => Ok(BackendKind::Http),
        "mock" => Ok(BackendKind::Mock),
        _ => Err("expected http or mock".into()),
    }
}

fn parse_mock_mode(s: &str) -> Result<MockMode, String> {
    match s {
        "scripted" => Ok(MockMode::Scripted),
        "lookup" => Ok(MockMode::Lookup),
        "echo_hash" => Ok(MockMode::EchoHash),
        _ => Err("expected scripted, lookup or echo_hash".into()),
    }
}

impl Common {
    /// Config file (or defaults), then flags, then environment.
    pub fn resolve(&self) -> kbvqa_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        fn set_opt<T: Clone>(slot: &mut Option<T>, v: &Option<T>) {
            if v.is_some() {
                *slot = v.clone();
            }
        }
        set_opt(&mut cfg.store.train, &self.train);
        set_opt(&mut cfg.store.test, &self.test);
        set_opt(&mut cfg.store.embeddings, &self.embeddings);
        set_opt(&mut cfg.store.neighbors, &self.neighbors);

        set(&mut cfg.pipeline.strategy, &self.strategy);
        set(&mut cfg.pipeline.n, &self.n);
        set(&mut cfg.pipeline.m, &self.m);
        set(&mut cfg.pipeline.k, &self.k);
        set(&mut cfg.pipeline.max_tokens, &self.max_tokens);
        set(&mut cfg.pipeline.caption_source, &self.caption_type);
        set(&mut cfg.run.seed, &self.seed);
        set_opt(&mut cfg.run.limit, &self.limit);
        set(&mut cfg.run.jobs, &self.jobs);

        set(&mut cfg.backend.kind, &self.backend);
        set_opt(&mut cfg.backend.endpoint_url, &self.endpoint);
        set(&mut cfg.backend.model_name, &self.model);
        set(&mut cfg.backend.timeout_ms, &self.timeout_ms);
        set(&mut cfg.backend.retry_count, &self.retries);
        set(&mut cfg.backend.max_concurrency, &self.max_concurrency);
        set(&mut cfg.decode.beam_size, &self.beam_size);
        set(&mut cfg.backend.mock_mode, &self.mock_mode);
        set_opt(&mut cfg.backend.mock_data, &self.mock_data);
        cfg.backend.apply_env();
        Ok(cfg)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(kbvqa_core::runner::default_out_dir)
    }
}
