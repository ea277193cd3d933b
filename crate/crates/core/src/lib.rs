//! Orchestration engine for few-shot in-context knowledge-based VQA.
//!
//! The pipeline ranks question-informative captions per image, picks
//! in-context examples by embedding similarity, renders `k` prompts from
//! disjoint shot sets, queries a text-completion backend once per prompt,
//! majority-votes the normalized answers and scores them with the soft VQA
//! accuracy metric. Model inference lives behind [`backend::Backend`]; the
//! engine itself never runs an encoder or a language model.

pub mod ablation;
pub mod backend;
pub mod caption_ranker;
pub mod config;
pub mod embedding_store;
pub mod ensemble;
pub mod error;
pub mod jsonl;
pub mod pipeline;
pub mod prompt_builder;
pub mod runner;
pub mod shot_selector;
pub mod vqa_eval;

pub use error::{Error, Result};
