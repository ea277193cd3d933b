#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use kbvqa_core::backend::mock::MockBackend;
use kbvqa_core::backend::{Backend, BackendError, CompletionRequest, CompletionResponse, MockMode};
use kbvqa_core::config::RunConfig;
use kbvqa_core::embedding_store::{EmbeddingVector, Store, TrainExample};
use kbvqa_core::jsonl::read_json;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn fixture(name: &str) -> PathBuf {
    fixtures().join(name)
}

pub fn fixture_store() -> Store {
    Store::ingest(
        &fixture("train.jsonl"),
        &fixture("test.jsonl"),
        &fixture("embeddings.json"),
    )
    .expect("fixture store ingests")
}

pub fn lookup_table() -> HashMap<String, String> {
    read_json(&fixture("mock_answers.json")).unwrap()
}

pub fn lookup_backend() -> MockBackend {
    MockBackend::lookup(lookup_table())
}

/// Small configuration that fits the 30-example fixture train split.
pub fn fixture_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.store.train = Some(fixture("train.jsonl"));
    cfg.store.test = Some(fixture("test.jsonl"));
    cfg.store.embeddings = Some(fixture("embeddings.json"));
    cfg.pipeline.n = 3;
    cfg.pipeline.m = 4;
    cfg.pipeline.k = 3;
    cfg.run.score = true;
    cfg.backend.mock_mode = MockMode::Lookup;
    cfg.backend.mock_data = Some(fixture("mock_answers.json"));
    cfg
}

pub fn unit(values: &[f32]) -> EmbeddingVector {
    EmbeddingVector::normalized(values.to_vec()).unwrap()
}

pub fn toy_example(id: &str, question: &str, answer: &str, captions: &[&str]) -> TrainExample {
    TrainExample {
        id: id.into(),
        question: question.into(),
        answer: answer.into(),
        captions: captions.iter().map(|c| c.to_string()).collect(),
        generic_captions: None,
        question_emb: unit(&[1.0, 0.0]),
        image_emb: unit(&[0.0, 1.0]),
        question_emb_id: format!("q:{id}:0"),
        image_emb_id: format!("img:{id}:0"),
    }
}

/// Wraps a backend and sleeps before answering, longer for earlier requests,
/// so completions arrive in reverse order.
pub struct DelayedBackend {
    pub inner: Arc<dyn Backend>,
    pub concurrency: usize,
}

impl Backend for DelayedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let j: u64 = request.id.rsplit('#').next().and_then(|s| s.parse().ok()).unwrap_or(0);
        std::thread::sleep(Duration::from_millis(2 + 8u64.saturating_sub(j * 2)));
        self.inner.complete(request)
    }

    fn tag(&self) -> String {
        self.inner.tag()
    }

    fn max_concurrency(&self) -> usize {
        self.concurrency
    }
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub mod oracles;
pub mod stub;

/// Charges 10 per context line with at most ten captions and 20 per longer
/// one; everything else is free.
pub struct CaptionHeavyCounter;

impl kbvqa_core::prompt_builder::TokenCounter for CaptionHeavyCounter {
    fn count(&self, text: &str) -> usize {
        text.lines()
            .filter(|l| l.starts_with("Context: "))
            .map(|l| if l.matches(", ").count() < 10 { 10 } else { 20 })
            .sum()
    }

    fn name(&self) -> &str {
        "caption_heavy"
    }
}
