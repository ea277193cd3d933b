//! Deterministic in-process backend.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::{Backend, BackendConfig, BackendError, CompletionRequest, CompletionResponse, MockMode};
use crate::error::{Error, Result};
use crate::jsonl::{read_json, sha256_hex};
use crate::prompt_builder::TokenCounter;

pub const UNKNOWN_ANSWER: &str = "unknown";

enum Mode {
    /// Pops answers in request order; `Err` entries simulate failed queries.
    Scripted(Mutex<VecDeque<std::result::Result<String, String>>>),
    /// Answers by the last question line of the prompt.
    Lookup(HashMap<String, String>),
    /// First 8 hex chars of the prompt's SHA-256.
    EchoHash,
}

pub struct MockBackend {
    mode: Mode,
    question_label: String,
    max_concurrency: usize,
    counter: Option<Arc<dyn TokenCounter>>,
}

impl MockBackend {
    pub fn scripted<I, S>(answers: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::scripted_results(answers.into_iter().map(|a| Ok(a.into())))
    }

    pub fn scripted_results<I>(items: I) -> Self
    where
        I: IntoIterator<Item = std::result::Result<String, String>>,
    {
        Self::with_mode(Mode::Scripted(Mutex::new(items.into_iter().collect())), 1)
    }

    pub fn lookup(table: HashMap<String, String>) -> Self {
        Self::with_mode(Mode::Lookup(table), 4)
    }

    pub fn echo_hash() -> Self {
        Self::with_mode(Mode::EchoHash, 4)
    }

    fn with_mode(mode: Mode, max_concurrency: usize) -> Self {
        Self {
            mode,
            question_label: "Q: ".into(),
            max_concurrency,
            counter: None,
        }
    }

    /// Label used by lookup mode to find the question line.
    pub fn with_question_label(mut self, label: impl Into<String>) -> Self {
        self.question_label = label.into();
        self
    }

    /// Ignored in scripted mode, which always runs one request at a time.
    pub fn with_max_concurrency(mut self, n: usize) -> Self {
        if !matches!(self.mode, Mode::Scripted(_)) {
            self.max_concurrency = n.max(1);
        }
        self
    }

    pub fn with_token_counter(mut self, counter: Arc<dyn TokenCounter>) -> Self {
        self.counter = Some(counter);
        self
    }

    pub fn from_config(cfg: &BackendConfig) -> Result<Self> {
        let backend = match cfg.mock_mode {
            MockMode::EchoHash => Self::echo_hash(),
            MockMode::Scripted => {
                let path = cfg
                    .mock_data
                    .as_ref()
                    .ok_or_else(|| Error::input("scripted mock needs mock_data (a JSON array)"))?;
                let answers: Vec<String> = read_json(path)?;
                Self::scripted(answers)
            }
            MockMode::Lookup => {
                let path = cfg
                    .mock_data
                    .as_ref()
                    .ok_or_else(|| Error::input("lookup mock needs mock_data (a JSON object)"))?;
                let table: HashMap<String, String> = read_json(path)?;
                Self::lookup(table)
            }
        };
        Ok(backend.with_max_concurrency(cfg.max_concurrency))
    }

    /// Text after the last line starting with the question label.
    pub fn last_question<'a>(&self, prompt: &'a str) -> Option<&'a str> {
        prompt
            .lines()
            .rev()
            .find_map(|l| l.strip_prefix(self.question_label.as_str()))
            .map(str::trim)
    }

    fn mode_name(&self) -> &'static str {
        match self.mode {
            Mode::Scripted(_) => "scripted",
            Mode::Lookup(_) => "lookup",
            Mode::EchoHash => "echo_hash",
        }
    }
}

impl Backend for MockBackend {
    fn complete(&self, request: &CompletionRequest) -> std::result::Result<CompletionResponse, BackendError> {
        let text = match &self.mode {
            Mode::Scripted(queue) => {
                let next = queue
                    .lock()
                    .unwrap_or_else(|e| e.into_inner())
                    .pop_front()
                    .ok_or(BackendError::ScriptExhausted)?;
                next.map_err(BackendError::Other)?
            }
            Mode::Lookup(table) => self
                .last_question(&request.prompt)
                .and_then(|q| table.get(q))
                .cloned()
                .unwrap_or_else(|| UNKNOWN_ANSWER.to_string()),
            Mode::EchoHash => sha256_hex(request.prompt.as_bytes())[..8].to_string(),
        };
        Ok(CompletionResponse {
            id: request.id.clone(),
            text,
            backend_tag: self.tag(),
            latency: Duration::ZERO,
        })
    }

    fn tag(&self) -> String {
        format!("mock:{}", self.mode_name())
    }

    fn max_concurrency(&self) -> usize {
        self.max_concurrency
    }

    fn token_counter(&self) -> Option<Arc<dyn TokenCounter>> {
        self.counter.clone()
    }
}
