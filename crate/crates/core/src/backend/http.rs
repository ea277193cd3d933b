//! JSON-over-HTTP completion client.
//!
//! Request body: `{"model", "prompt", "max_tokens", "num_beams", "stop", ...extra}`.
//! Reply body: `{"text": "<continuation>"}` (an OpenAI-style
//! `{"choices": [{"text": ...}]}` is accepted as well).

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde_json::{json, Map, Value};
use tracing::{debug, warn};

use super::{Backend, BackendConfig, BackendError, CompletionRequest, CompletionResponse, Semaphore};
use crate::error::{Error, Result};

pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    model: String,
    auth_token: Option<String>,
    retry_count: u32,
    retry_backoff: Duration,
    max_concurrency: usize,
    limiter: Semaphore,
    greedy_only: AtomicBool,
    degradations: Mutex<BTreeSet<String>>,
}

enum Outcome {
    Done(String),
    Transient(String),
    BeamsRejected,
    Fatal(BackendError),
}

impl HttpBackend {
    pub fn new(cfg: &BackendConfig) -> Result<Self> {
        let url = cfg
            .endpoint_url
            .clone()
            .filter(|u| !u.is_empty())
            .ok_or_else(|| Error::input("http backend requires endpoint_url"))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            url,
            model: cfg.model_name.clone(),
            auth_token: cfg.auth_token.clone(),
            retry_count: cfg.retry_count,
            retry_backoff: Duration::from_millis(cfg.retry_backoff_ms),
            max_concurrency: cfg.max_concurrency.max(1),
            limiter: Semaphore::new(cfg.max_concurrency.max(1)),
            greedy_only: AtomicBool::new(false),
            degradations: Mutex::new(BTreeSet::new()),
        })
    }

    fn body(&self, request: &CompletionRequest, greedy: bool) -> Value {
        let p = &request.params;
        let mut body = Map::new();
        for (k, v) in &p.extra {
            body.insert(k.clone(), v.clone());
        }
        body.insert("model".into(), json!(self.model));
        body.insert("prompt".into(), json!(request.prompt));
        body.insert("max_tokens".into(), json!(p.max_new_tokens));
        body.insert("num_beams".into(), json!(if greedy { 1 } else { p.beam_size }));
        body.insert("stop".into(), json!(p.stop_sequences));
        Value::Object(body)
    }

    fn attempt(&self, request: &CompletionRequest, greedy: bool) -> Outcome {
        let mut call = self.agent.post(&self.url);
        if let Some(token) = &self.auth_token {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = match call.send_json(self.body(request, greedy)) {
            Ok(r) => r,
            Err(e) => return Outcome::Transient(e.to_string()),
        };
        let status = resp.status().as_u16();
        let body = match resp.body_mut().read_to_string() {
            Ok(b) => b,
            Err(e) if status < 400 => return Outcome::Transient(format!("reading body: {e}")),
            Err(_) => String::new(),
        };
        match status {
            200..=299 => match parse_text(&body) {
                Some(text) => Outcome::Done(strip_echo(&request.prompt, text)),
                None => Outcome::Fatal(BackendError::Malformed(truncate(&body, 200))),
            },
            500..=599 | 408 | 429 => Outcome::Transient(format!("status {status}")),
            _ if !greedy && request.params.beam_size > 1 && body.contains("num_beams") => Outcome::BeamsRejected,
            _ => Outcome::Fatal(BackendError::Rejected {
                status,
                body: truncate(&body, 200),
            }),
        }
    }
}

impl Backend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> std::result::Result<CompletionResponse, BackendError> {
        let _permit = self.limiter.acquire();
        let started = Instant::now();
        let mut attempts = 0u32;
        loop {
            let greedy = self.greedy_only.load(Ordering::Relaxed);
            attempts += 1;
            match self.attempt(request, greedy) {
                Outcome::Done(text) => {
                    return Ok(CompletionResponse {
                        id: request.id.clone(),
                        text,
                        backend_tag: self.tag(),
                        latency: started.elapsed(),
                    })
                }
                Outcome::BeamsRejected => {
                    warn!("endpoint rejected num_beams; falling back to greedy decoding");
                    self.greedy_only.store(true, Ordering::Relaxed);
                    self.degradations
                        .lock()
                        .unwrap_or_else(|e| e.into_inner())
                        .insert(format!(
                            "beam search (num_beams={}) rejected by endpoint; greedy decoding used",
                            request.params.beam_size
                        ));
                    attempts -= 1;
                }
                Outcome::Fatal(e) => return Err(e),
                Outcome::Transient(reason) => {
                    if attempts > self.retry_count {
                        return Err(BackendError::Exhausted { attempts, last: reason });
                    }
                    let wait = self.retry_backoff * 2u32.saturating_pow(attempts - 1);
                    debug!(id = %request.id, attempts, ?wait, %reason, "retrying completion");
                    std::thread::sleep(wait);
                }
            }
        }
    }

    fn tag(&self) -> String {
        format!("http:{}", self.model)
    }

    fn max_concurrency(&self) -> usize {
        self.max_concurrency
    }

    fn degradations(&self) -> Vec<String> {
        self.degradations
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .cloned()
            .collect()
    }
}

fn parse_text(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    if let Some(t) = v.get("text").and_then(Value::as_str) {
        return Some(t.to_string());
    }
    v.get("choices")?.get(0)?.get("text")?.as_str().map(str::to_string)
}

/// Some servers return prompt + continuation.
fn strip_echo(prompt: &str, text: String) -> String {
    match text.strip_prefix(prompt) {
        Some(rest) if !prompt.is_empty() => rest.to_string(),
        _ => text,
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}
