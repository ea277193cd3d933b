//! Request/response logging and offline replay.
//!
//! A [`RecordingBackend`] wraps any backend and keeps every exchange; the
//! log is written as JSONL sorted by correlation id. A [`ReplayBackend`]
//! answers from such a log, keyed by prompt and decode parameters, so a
//! recorded run can be reproduced without network access.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, CompletionRequest, CompletionResponse, DecodeParams};
use crate::error::{Error, Result};
use crate::jsonl::{read_jsonl, sha256_hex, write_jsonl};
use crate::prompt_builder::TokenCounter;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub id: String,
    pub key: String,
    pub prompt: String,
    pub params: DecodeParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub backend_tag: String,
}

/// Lookup key for a request: digest of prompt and decode parameters.
pub fn request_key(prompt: &str, params: &DecodeParams) -> String {
    let params = serde_json::to_string(params).unwrap_or_default();
    sha256_hex(format!("{prompt}\u{0}{params}").as_bytes())
}

pub struct RecordingBackend {
    inner: Arc<dyn Backend>,
    log: Mutex<Vec<ReplayEntry>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Recorded exchanges sorted by correlation id.
    pub fn entries(&self) -> Vec<ReplayEntry> {
        let mut entries = self.log.lock().unwrap_or_else(|e| e.into_inner()).clone();
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        entries
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.entries())
    }
}

impl Backend for RecordingBackend {
    fn complete(&self, request: &CompletionRequest) -> std::result::Result<CompletionResponse, BackendError> {
        let result = self.inner.complete(request);
        let (text, error) = match &result {
            Ok(r) => (Some(r.text.clone()), None),
            Err(e) => (None, Some(e.to_string())),
        };
        self.log.lock().unwrap_or_else(|e| e.into_inner()).push(ReplayEntry {
            id: request.id.clone(),
            key: request_key(&request.prompt, &request.params),
            prompt: request.prompt.clone(),
            params: request.params.clone(),
            text,
            error,
            backend_tag: self.inner.tag(),
        });
        result
    }

    fn tag(&self) -> String {
        self.inner.tag()
    }

    fn max_concurrency(&self) -> usize {
        self.inner.max_concurrency()
    }

    fn token_counter(&self) -> Option<Arc<dyn TokenCounter>> {
        self.inner.token_counter()
    }

    fn degradations(&self) -> Vec<String> {
        self.inner.degradations()
    }
}

pub struct ReplayBackend {
    table: HashMap<String, std::result::Result<String, String>>,
    tag: String,
}

impl ReplayBackend {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(read_jsonl(path)?)
    }

    pub fn from_entries(entries: Vec<ReplayEntry>) -> Result<Self> {
        let tag = entries
            .first()
            .map(|e| format!("replay:{}", e.backend_tag))
            .unwrap_or_else(|| "replay".into());
        let mut table = HashMap::with_capacity(entries.len());
        for e in entries {
            let outcome = match (e.text, e.error) {
                (Some(t), _) => Ok(t),
                (None, Some(err)) => Err(err),
                (None, None) => {
                    return Err(Error::input(format!(
                        "replay entry {:?} has neither text nor error",
                        e.id
                    )))
                }
            };
            table.insert(e.key, outcome);
        }
        Ok(Self { table, tag })
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, request: &CompletionRequest) -> std::result::Result<CompletionResponse, BackendError> {
        let key = request_key(&request.prompt, &request.params);
        match self.table.get(&key) {
            Some(Ok(text)) => Ok(CompletionResponse {
                id: request.id.clone(),
                text: text.clone(),
                backend_tag: self.tag.clone(),
                latency: Duration::ZERO,
            }),
            Some(Err(e)) => Err(BackendError::Other(e.clone())),
            None => Err(BackendError::Other(format!(
                "request {} not present in replay log",
                request.id
            ))),
        }
    }

    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn max_concurrency(&self) -> usize {
        8
    }
}
