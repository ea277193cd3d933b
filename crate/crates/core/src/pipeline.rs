//! End-to-end inference over a store: captions, shots, prompts, ensemble.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, DecodeParams};
use crate::caption_ranker::{rank_captions, RankedCaptions};
use crate::embedding_store::{Store, TestSample, TrainExample};
use crate::ensemble::{run_sample, PredictionRecord};
use crate::error::{Error, Result};
use crate::prompt_builder::{
    enforce_budget, PromptBundle, PromptParts, PromptTemplate, TokenCounter, WordEstimate, DEFAULT_MAX_TOKENS,
};
use crate::shot_selector::{
    assign_shots, rank_avg_sim, rank_precomputed, rank_random, NeighborFile, ShotRanking, Strategy,
};
use crate::vqa_eval::{normalize_str, MetricVariant, SkippedSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    /// Captions generated from question-salient image regions.
    #[default]
    QuestionInformative,
    /// Output of a generic captioner (`generic_captions` field).
    Generic,
}

impl std::str::FromStr for CaptionSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "question_informative" | "informative" => Ok(CaptionSource::QuestionInformative),
            "generic" => Ok(CaptionSource::Generic),
            other => Err(Error::input(format!("unknown caption type {other:?}"))),
        }
    }
}

impl std::fmt::Display for CaptionSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CaptionSource::QuestionInformative => "question_informative",
            CaptionSource::Generic => "generic",
        })
    }
}

/// Every knob that changes what the pipeline produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub strategy: Strategy,
    /// Shots per prompt.
    pub n: usize,
    /// Captions per example.
    pub m: usize,
    /// Prompts per test sample.
    pub k: usize,
    pub max_tokens: usize,
    pub caption_source: CaptionSource,
    pub metric: MetricVariant,
    pub template: PromptTemplate,
    pub decode: DecodeParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::AvgSim,
            n: 10,
            m: 9,
            k: 5,
            max_tokens: DEFAULT_MAX_TOKENS,
            caption_source: CaptionSource::QuestionInformative,
            metric: MetricVariant::LeaveOneOut,
            template: PromptTemplate::default(),
            decode: DecodeParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.k == 0 {
            return Err(Error::input(format!(
                "n, m and k must be positive (n={}, m={}, k={})",
                self.n, self.m, self.k
            )));
        }
        self.template.validate()?;
        self.decode.validate()
    }

    pub fn shots_needed(&self) -> usize {
        self.n * self.k
    }
}

/// Shot rankings computed once and shared between runs that use the same
/// strategy (ablation sweeps).
#[derive(Debug, Clone)]
pub struct RankingCache {
    pub strategy: Strategy,
    /// Ranking depth kept per sample.
    pub depth: usize,
    rankings: HashMap<String, Option<ShotRanking>>,
}

impl RankingCache {
    pub fn build(
        store: &Store,
        strategy: Strategy,
        depth: usize,
        neighbors: Option<&NeighborFile>,
        samples: &[&TestSample],
    ) -> Result<Self> {
        let rankings = samples
            .par_iter()
            .map(|t| Ok((t.id.clone(), compute_ranking(store, strategy, depth, neighbors, t)?)))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self {
            strategy,
            depth,
            rankings,
        })
    }

    fn get(&self, strategy: Strategy, depth: usize, test_id: &str) -> Option<&Option<ShotRanking>> {
        if self.strategy != strategy || self.depth < depth {
            return None;
        }
        self.rankings.get(test_id)
    }
}

fn compute_ranking(
    store: &Store,
    strategy: Strategy,
    depth: usize,
    neighbors: Option<&NeighborFile>,
    test: &TestSample,
) -> Result<Option<ShotRanking>> {
    let mut ranking = match strategy {
        Strategy::AvgSim => Some(rank_avg_sim(test, store, Some(depth))?),
        Strategy::Random { seed } => Some(rank_random(&test.id, store, seed)?),
        Strategy::Precomputed => {
            let neighbors = neighbors.ok_or_else(|| Error::input("precomputed strategy needs a neighbor file"))?;
            rank_precomputed(&test.id, neighbors, store)?
        }
    };
    if let Some(r) = ranking.as_mut() {
        r.ranked_train_ids.truncate(depth);
        if let Some(s) = r.scores.as_mut() {
            s.truncate(depth);
        }
    }
    Ok(ranking)
}

/// Per-sample result of prompt construction.
#[derive(Debug, Clone)]
pub enum Prepared {
    Ready(PromptBundle),
    Skipped(SkippedSample),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub test_id: String,
    pub effective_n: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Sorted by test id.
    pub predictions: Vec<PredictionRecord>,
    pub skipped: Vec<SkippedSample>,
    pub stats: Vec<SampleStats>,
    pub degradations: Vec<String>,
}

impl RunOutput {
    /// Mean over samples of the mean surviving shots per prompt.
    pub fn effective_n_mean(&self) -> Option<f64> {
        if self.stats.is_empty() {
            return None;
        }
        let per_sample = self
            .stats
            .iter()
            .map(|s| s.effective_n.iter().sum::<usize>() as f64 / s.effective_n.len().max(1) as f64);
        Some(per_sample.sum::<f64>() / self.stats.len() as f64)
    }
}

pub struct Pipeline<'a> {
    store: &'a Store,
    config: PipelineConfig,
    neighbors: Option<&'a NeighborFile>,
    counter: Arc<dyn TokenCounter>,
    cache: Option<&'a RankingCache>,
}

impl<'a> Pipeline<'a> {
    pub fn new(store: &'a Store, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        if store.train.len() < config.shots_needed() && config.strategy != Strategy::Precomputed {
            return Err(Error::input(format!(
                "not enough in-context examples (k*n): need {}, have {}",
                config.shots_needed(),
                store.train.len()
            )));
        }
        Ok(Self {
            store,
            config,
            neighbors: None,
            counter: Arc::new(WordEstimate),
            cache: None,
        })
    }

    pub fn with_neighbors(mut self, neighbors: &'a NeighborFile) -> Self {
        self.neighbors = Some(neighbors);
        self
    }

    pub fn with_token_counter(mut self, counter: Arc<dyn TokenCounter>) -> Self {
        self.counter = counter;
        self
    }

    pub fn with_cache(mut self, cache: &'a RankingCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn token_counter_name(&self) -> String {
        self.counter.name().to_string()
    }

    /// Test samples sorted by id, optionally the first `limit` of them.
    pub fn samples(&self, limit: Option<usize>) -> Vec<&'a TestSample> {
        let mut samples: Vec<&TestSample> = self.store.test.iter().collect();
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(l) = limit {
            samples.truncate(l);
        }
        samples
    }

    pub fn test_captions(&self, test: &TestSample) -> Result<RankedCaptions> {
        match self.config.caption_source {
            CaptionSource::QuestionInformative => {
                rank_captions(&test.id, &test.candidate_captions, &test.image_emb, self.config.m)
            }
            CaptionSource::Generic => {
                let generic = test
                    .generic_captions
                    .as_deref()
                    .ok_or_else(|| Error::input(format!("test sample {:?} lacks field generic_captions", test.id)))?;
                nonempty_prefix(&test.id, generic, self.config.m)
            }
        }
    }

    /// Stored caption order is trusted for train examples.
    pub fn shot_captions(&self, shot: &TrainExample) -> Result<RankedCaptions> {
        match self.config.caption_source {
            CaptionSource::QuestionInformative => {
                Ok(RankedCaptions::from_prefix(&shot.id, &shot.captions, self.config.m))
            }
            CaptionSource::Generic => {
                let generic = shot
                    .generic_captions
                    .as_deref()
                    .ok_or_else(|| Error::input(format!("train example {:?} lacks field generic_captions", shot.id)))?;
                nonempty_prefix(&shot.id, generic, self.config.m)
            }
        }
    }

    /// `Ok(None)` when the sample must be skipped (no neighbor entry).
    pub fn ranking(&self, test: &TestSample) -> Result<Option<ShotRanking>> {
        let depth = self.config.shots_needed();
        if let Some(cached) = self.cache.and_then(|c| c.get(self.config.strategy, depth, &test.id)) {
            let mut r = cached.clone();
            if let Some(r) = r.as_mut() {
                r.ranked_train_ids.truncate(depth);
                if let Some(s) = r.scores.as_mut() {
                    s.truncate(depth);
                }
            }
            return Ok(r);
        }
        compute_ranking(self.store, self.config.strategy, depth, self.neighbors, test)
    }

    /// Builds the `k` prompts for one sample.
    pub fn prepare(&self, test: &TestSample) -> Result<Prepared> {
        let Some(ranking) = self.ranking(test)? else {
            return Ok(Prepared::Skipped(SkippedSample {
                id: test.id.clone(),
                reason: "no neighbor entry".into(),
            }));
        };
        let assignment = assign_shots(&ranking, self.config.n, self.config.k)?;
        let test_captions = self.test_captions(test)?;
        let mut prompts = Vec::with_capacity(self.config.k);
        let mut dropped_shots = Vec::with_capacity(self.config.k);
        for ids in &assignment.prompts {
            let shots: Vec<&TrainExample> = ids
                .iter()
                .map(|id| {
                    self.store
                        .train_by_id(id)
                        .ok_or_else(|| Error::input(format!("unknown train id {id:?}")))
                })
                .collect::<Result<_>>()?;
            let captions = shots
                .iter()
                .map(|s| self.shot_captions(s))
                .collect::<Result<Vec<_>>>()?;
            let mut parts =
                PromptParts::build(&self.config.template, &shots, &captions, &test.question, &test_captions)?;
            match enforce_budget(&mut parts, self.config.max_tokens, self.counter.as_ref()) {
                Ok(dropped) => {
                    prompts.push(parts.assemble());
                    dropped_shots.push(dropped);
                }
                Err(e) => {
                    return Ok(Prepared::Skipped(SkippedSample {
                        id: test.id.clone(),
                        reason: e.to_string(),
                    }))
                }
            }
        }
        Ok(Prepared::Ready(PromptBundle {
            test_id: test.id.clone(),
            prompts,
            assignment,
            dropped_shots,
        }))
    }

    pub fn prepare_all(&self, samples: &[&TestSample]) -> Result<Vec<Prepared>> {
        samples.par_iter().map(|t| self.prepare(t)).collect()
    }

    /// Runs prompt construction and the ensemble over `samples` using a pool
    /// of `jobs` workers. Output order and content do not depend on `jobs`.
    pub fn run(&self, samples: &[&TestSample], backend: &dyn Backend, jobs: usize) -> Result<RunOutput> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::Backend(format!("worker pool: {e}")))?;
        let prepared = pool.install(|| self.prepare_all(samples))?;

        let mut bundles = Vec::new();
        let mut skipped = Vec::new();
        for p in prepared {
            match p {
                Prepared::Ready(b) => bundles.push(b),
                Prepared::Skipped(s) => skipped.push(s),
            }
        }
        let decode = &self.config.decode;
        let predictions: Vec<PredictionRecord> = pool.install(|| {
            bundles
                .par_iter()
                .map(|b| run_sample(b, backend, decode, &normalize_str))
                .collect()
        });
        let stats = bundles
            .iter()
            .map(|b| SampleStats {
                test_id: b.test_id.clone(),
                effective_n: b.effective_n(),
            })
            .collect();
        Ok(RunOutput {
            predictions,
            skipped,
            stats,
            degradations: backend.degradations(),
        })
    }
}

fn nonempty_prefix(id: &str, captions: &[String], m: usize) -> Result<RankedCaptions> {
    if captions.is_empty() {
        return Err(Error::input(format!("{id:?}: generic_captions is empty")));
    }
    Ok(RankedCaptions::from_prefix(id, captions, m))
}
