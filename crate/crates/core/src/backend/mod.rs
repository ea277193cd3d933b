//! Text-completion backends.
//!
//! The engine talks to a language model only through [`Backend::complete`].
//! Implementations: [`http::HttpBackend`] for a remote completion endpoint,
//! [`mock::MockBackend`] for tests and dry runs, and the
//! [`replay`] pair that records request/response logs and serves them back
//! offline.

pub mod http;
pub mod mock;
pub mod replay;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt_builder::TokenCounter;

pub const ENV_ENDPOINT_URL: &str = "KBVQA_ENDPOINT_URL";
pub const ENV_AUTH_TOKEN: &str = "KBVQA_AUTH_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeParams {
    pub beam_size: usize,
    pub max_new_tokens: usize,
    pub stop_sequences: Vec<String>,
    /// Extra generation keys passed through to the endpoint verbatim
    /// (length penalty, repetition penalty, ...). No defaults.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            beam_size: 2,
            max_new_tokens: 5,
            stop_sequences: vec!["\n".into(), "Q:".into(), "===".into()],
            extra: BTreeMap::new(),
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_new_tokens == 0 {
            return Err(Error::input("beam_size and max_new_tokens must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    /// Correlation id, `<test_id>#<prompt index>` in pipeline runs.
    pub id: String,
    pub prompt: String,
    pub params: DecodeParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResponse {
    pub id: String,
    /// Continuation only; never includes the prompt.
    pub text: String,
    pub backend_tag: String,
    pub latency: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("malformed reply: {0}")]
    Malformed(String),
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("scripted mock queue exhausted")]
    ScriptExhausted,
    #[error("{0}")]
    Other(String),
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> std::result::Result<CompletionResponse, BackendError>;

    /// Identifies backend kind and model, recorded in run manifests.
    fn tag(&self) -> String;

    /// Upper bound on in-flight requests. With 1, callers issue requests
    /// sequentially in prompt order.
    fn max_concurrency(&self) -> usize {
        1
    }

    /// Exact tokenizer, when the backend can provide one.
    fn token_counter(&self) -> Option<Arc<dyn TokenCounter>> {
        None
    }

    /// Behaviour changes forced by the endpoint (e.g. beam search unavailable).
    fn degradations(&self) -> Vec<String> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockMode {
    Scripted,
    Lookup,
    EchoHash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub timeout_ms: u64,
    pub retry_count: u32,
    pub retry_backoff_ms: u64,
    pub max_concurrency: usize,
    pub mock_mode: MockMode,
    /// JSON file: an answer array (scripted) or a question -> answer object (lookup).
    pub mock_data: Option<PathBuf>,
    /// Never serialized; read from the environment.
    #[serde(skip)]
    pub auth_token: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint_url: None,
            model_name: "default".into(),
            timeout_ms: 30_000,
            retry_count: 2,
            retry_backoff_ms: 250,
            max_concurrency: 4,
            mock_mode: MockMode::EchoHash,
            mock_data: None,
            auth_token: None,
        }
    }
}

impl BackendConfig {
    /// Applies `KBVQA_ENDPOINT_URL` / `KBVQA_AUTH_TOKEN` when set.
    pub fn apply_env(&mut self) {
        if let Ok(url) = std::env::var(ENV_ENDPOINT_URL) {
            if !url.is_empty() {
                self.endpoint_url = Some(url);
            }
        }
        if let Ok(token) = std::env::var(ENV_AUTH_TOKEN) {
            if !token.is_empty() {
                self.auth_token = Some(token);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == BackendKind::Http && self.endpoint_url.as_deref().unwrap_or("").is_empty() {
            return Err(Error::input(format!(
                "http backend requires endpoint_url (or {ENV_ENDPOINT_URL})"
            )));
        }
        if self.max_concurrency == 0 {
            return Err(Error::input("max_concurrency must be at least 1"));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Arc<dyn Backend>> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Http => Arc::new(http::HttpBackend::new(self)?),
            BackendKind::Mock => Arc::new(mock::MockBackend::from_config(self)?),
        })
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

pub struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.permits.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.freed.notify_one();
    }
}
