//! Multi-query ensemble: issue `k` prompts, cut and normalize each answer,
//! majority-vote the result.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::backend::{Backend, BackendError, CompletionRequest, DecodeParams};
use crate::prompt_builder::PromptBundle;

pub const DEFAULT_STOP_MARKERS: [&str; 3] = ["\n", "Q:", "==="];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub test_id: String,
    /// One slot per prompt; `None` where the query failed.
    pub raw_generations: Vec<Option<String>>,
    pub extracted: Vec<Option<String>>,
    pub normalized: Vec<Option<String>>,
    /// Absent when every query failed.
    pub voted_answer: Option<String>,
    pub vote_counts: BTreeMap<String, usize>,
    pub failed_queries: usize,
}

impl PredictionRecord {
    pub fn is_failed(&self) -> bool {
        self.voted_answer.is_none()
    }

    /// Successful queries whose answer came out empty.
    pub fn empty_answers(&self) -> usize {
        self.normalized.iter().filter(|n| n.as_deref() == Some("")).count()
    }
}

/// Cuts a continuation at the first stop marker and trims it.
pub fn extract_answer(generation: &str) -> String {
    extract_answer_with(generation, &DEFAULT_STOP_MARKERS)
}

pub fn extract_answer_with<S: AsRef<str>>(generation: &str, markers: &[S]) -> String {
    let cut = markers
        .iter()
        .filter_map(|m| {
            let m = m.as_ref();
            (!m.is_empty()).then(|| generation.find(m)).flatten()
        })
        .min()
        .unwrap_or(generation.len());
    generation[..cut].trim().to_string()
}

/// Most frequent answer; ties go to the answer that first appears at the
/// lowest prompt index. Returns the winner and the per-answer counts.
pub fn majority_vote<S: AsRef<str>>(answers: &[S]) -> Option<(String, BTreeMap<String, usize>)> {
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    for (i, a) in answers.iter().enumerate() {
        counts.entry(a.as_ref()).or_insert((0, i)).0 += 1;
    }
    let (winner, _) = counts
        .iter()
        .max_by(|(_, (ca, fa)), (_, (cb, fb))| ca.cmp(cb).then(fb.cmp(fa)))?;
    let winner = winner.to_string();
    let counts = counts.into_iter().map(|(a, (c, _))| (a.to_string(), c)).collect();
    Some((winner, counts))
}

/// Sends every prompt of `bundle`, then extracts, normalizes and votes.
///
/// Requests carry the correlation id `<test_id>#<j>` and results are slotted
/// back by that id, so completion order never affects the record. Failed
/// queries are left out of the vote; if all fail the record has no answer.
pub fn run_sample(
    bundle: &PromptBundle,
    backend: &dyn Backend,
    params: &DecodeParams,
    normalizer: &dyn Fn(&str) -> String,
) -> PredictionRecord {
    let k = bundle.prompts.len();
    let requests: Vec<CompletionRequest> = bundle
        .prompts
        .iter()
        .enumerate()
        .map(|(j, prompt)| CompletionRequest {
            id: correlation_id(&bundle.test_id, j),
            prompt: prompt.clone(),
            params: params.clone(),
        })
        .collect();

    let outcomes = issue_all(&requests, backend);

    let mut raw = vec![None; k];
    let mut extracted = vec![None; k];
    let mut normalized = vec![None; k];
    let mut failed = 0;
    for (j, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(text) => {
                let answer = extract_answer_with(&text, &params.stop_sequences);
                normalized[j] = Some(normalizer(&answer));
                extracted[j] = Some(answer);
                raw[j] = Some(text);
            }
            Err(e) => {
                warn!(id = %requests[j].id, error = %e, "query failed");
                failed += 1;
            }
        }
    }
    let votes: Vec<&str> = normalized.iter().flatten().map(String::as_str).collect();
    let (voted_answer, vote_counts) = match majority_vote(&votes) {
        Some((w, c)) => (Some(w), c),
        None => (None, BTreeMap::new()),
    };
    PredictionRecord {
        test_id: bundle.test_id.clone(),
        raw_generations: raw,
        extracted,
        normalized,
        voted_answer,
        vote_counts,
        failed_queries: failed,
    }
}

pub fn correlation_id(test_id: &str, prompt_index: usize) -> String {
    format!("{test_id}#{prompt_index}")
}

type Outcome = Result<String, BackendError>;

fn issue_all(requests: &[CompletionRequest], backend: &dyn Backend) -> Vec<Outcome> {
    let call = |req: &CompletionRequest| -> Outcome {
        let resp = backend.complete(req)?;
        if resp.id != req.id {
            return Err(BackendError::Malformed(format!(
                "response id {:?} does not match request {:?}",
                resp.id, req.id
            )));
        }
        Ok(resp.text)
    };
    let workers = backend.max_concurrency().min(requests.len());
    if workers <= 1 {
        return requests.iter().map(call).collect();
    }

    let by_id: HashMap<&str, usize> = requests.iter().enumerate().map(|(j, r)| (r.id.as_str(), j)).collect();
    let slots: Mutex<Vec<Option<Outcome>>> = Mutex::new(vec![None; requests.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                let Some(req) = requests.get(j) else { break };
                let outcome = call(req);
                let slot = by_id[req.id.as_str()];
                slots.lock().unwrap_or_else(|e| e.into_inner())[slot] = Some(outcome);
            });
        }
    });
    slots
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|o| o.unwrap_or_else(|| Err(BackendError::Other("no response".into()))))
        .collect()
}
