//! Prompt rendering and token-budget trimming.
//!
//! Layout of one prompt, with `SEP` the block separator:
//!
//! ```text
//! <head> SEP
//! <context_label><caption, caption>\n<question_label><question>\n<answer_label><answer> SEP
//! ...                                  (one block per shot, least similar first)
//! <context_label><test captions>\n<question_label><test question>\n<answer_label>
//! ```

use serde::{Deserialize, Serialize};

use crate::caption_ranker::RankedCaptions;
use crate::embedding_store::TrainExample;
use crate::error::{Error, Result};
use crate::shot_selector::ShotAssignment;

pub const DEFAULT_MAX_TOKENS: usize = 2048;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplate {
    pub head: String,
    pub context_label: String,
    pub question_label: String,
    pub answer_label: String,
    pub block_separator: String,
    pub caption_joiner: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            head: "Please answer the question according to the context.".into(),
            context_label: "Context: ".into(),
            question_label: "Q: ".into(),
            answer_label: "A: ".into(),
            block_separator: "\n===\n".into(),
            caption_joiner: ", ".into(),
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("head", &self.head),
            ("context_label", &self.context_label),
            ("question_label", &self.question_label),
            ("answer_label", &self.answer_label),
            ("block_separator", &self.block_separator),
            ("caption_joiner", &self.caption_joiner),
        ] {
            if v.is_empty() {
                return Err(Error::input(format!("template field {name} must not be empty")));
            }
        }
        Ok(())
    }

    fn context_line<'a>(&self, captions: impl Iterator<Item = &'a str>) -> String {
        let joined = captions.collect::<Vec<_>>().join(&self.caption_joiner);
        format!("{}{}", self.context_label, joined)
    }

    pub fn shot_block(&self, shot: &TrainExample, captions: &RankedCaptions) -> Result<String> {
        if captions.captions.is_empty() {
            return Err(Error::input(format!("shot {:?} has no captions", shot.id)));
        }
        Ok(format!(
            "{}\n{}{}\n{}{}",
            self.context_line(captions.texts()),
            self.question_label,
            shot.question,
            self.answer_label,
            shot.answer
        ))
    }

    /// The final block; ends with the bare answer label.
    pub fn test_block(&self, question: &str, captions: &RankedCaptions) -> Result<String> {
        if captions.captions.is_empty() {
            return Err(Error::input(format!(
                "test sample {:?} has no captions",
                captions.sample_id
            )));
        }
        Ok(format!(
            "{}\n{}{}\n{}",
            self.context_line(captions.texts()),
            self.question_label,
            question,
            self.answer_label
        ))
    }
}

/// A prompt split into the pieces budget trimming works on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptParts {
    pub head: String,
    /// Rendered shot blocks, least similar first.
    pub shots: Vec<String>,
    pub test: String,
    pub separator: String,
}

impl PromptParts {
    pub fn build(
        template: &PromptTemplate,
        shots: &[&TrainExample],
        shot_captions: &[RankedCaptions],
        test_question: &str,
        test_captions: &RankedCaptions,
    ) -> Result<Self> {
        if shots.len() != shot_captions.len() {
            return Err(Error::input(format!(
                "{} shots but {} caption lists",
                shots.len(),
                shot_captions.len()
            )));
        }
        let test = template.test_block(test_question, test_captions)?;
        let shots = shots
            .iter()
            .zip(shot_captions)
            .map(|(s, c)| template.shot_block(s, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            head: template.head.clone(),
            shots,
            test,
            separator: template.block_separator.clone(),
        })
    }

    pub fn assemble(&self) -> String {
        let mut out = String::with_capacity(
            self.head.len()
                + self.test.len()
                + self.shots.iter().map(|s| s.len() + self.separator.len()).sum::<usize>()
                + self.separator.len(),
        );
        out.push_str(&self.head);
        out.push_str(&self.separator);
        for shot in &self.shots {
            out.push_str(shot);
            out.push_str(&self.separator);
        }
        out.push_str(&self.test);
        out
    }
}

/// Renders one complete prompt.
pub fn render(
    template: &PromptTemplate,
    shots: &[&TrainExample],
    shot_captions: &[RankedCaptions],
    test_question: &str,
    test_captions: &RankedCaptions,
) -> Result<String> {
    Ok(PromptParts::build(template, shots, shot_captions, test_question, test_captions)?.assemble())
}

/// Maps text to an estimated token count. Implementations must be pure.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;

    fn name(&self) -> &str;
}

/// Whitespace word count times 1.3, rounded up.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordEstimate;

impl TokenCounter for WordEstimate {
    fn count(&self, text: &str) -> usize {
        let words = text.split_whitespace().count();
        (words * 13).div_ceil(10)
    }

    fn name(&self) -> &str {
        "words_x1.3"
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("budget: head and test block need {needed} tokens, budget is {max_tokens}")]
pub struct BudgetExceeded {
    pub needed: usize,
    pub max_tokens: usize,
}

/// Drops shots from the front (least similar) until the assembled prompt fits
/// `max_tokens`. Returns the number dropped. The head and test block are
/// never removed; if they alone overflow the budget the prompt is rejected.
pub fn enforce_budget(
    parts: &mut PromptParts,
    max_tokens: usize,
    counter: &dyn TokenCounter,
) -> std::result::Result<usize, BudgetExceeded> {
    let mut dropped = 0;
    loop {
        let tokens = counter.count(&parts.assemble());
        if tokens <= max_tokens {
            return Ok(dropped);
        }
        if parts.shots.is_empty() {
            return Err(BudgetExceeded {
                needed: tokens,
                max_tokens,
            });
        }
        parts.shots.remove(0);
        dropped += 1;
    }
}

/// All `k` prompts for one test sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub test_id: String,
    pub prompts: Vec<String>,
    pub assignment: ShotAssignment,
    pub dropped_shots: Vec<usize>,
}

impl PromptBundle {
    /// Shots that survived trimming, per prompt.
    pub fn effective_n(&self) -> Vec<usize> {
        self.assignment
            .prompts
            .iter()
            .zip(&self.dropped_shots)
            .map(|(p, d)| p.len() - d)
            .collect()
    }
}
