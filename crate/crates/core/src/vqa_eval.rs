//! Answer normalization and soft VQA accuracy.
//!
//! A prediction matching `c` of the ten human answers scores, under the
//! leave-one-out convention, the mean over the ten 9-answer subsets of
//! `min(matches_in_subset / 3, 1)`. The direct variant is `min(c / 3, 1)`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ensemble::PredictionRecord;
use crate::error::{Error, Result};

pub const HUMAN_ANSWERS: usize = 10;

const ARTICLES: [&str; 3] = ["a", "an", "the"];
const NUMBER_WORDS: [(&str, &str); 11] = [
    ("zero", "0"),
    ("one", "1"),
    ("two", "2"),
    ("three", "3"),
    ("four", "4"),
    ("five", "5"),
    ("six", "6"),
    ("seven", "7"),
    ("eight", "8"),
    ("nine", "9"),
    ("ten", "10"),
];

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormalizedAnswer(String);

impl NormalizedAnswer {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for NormalizedAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Lowercases, maps ASCII punctuation to spaces (keeping a period between two
/// digits), drops articles, rewrites number words zero..ten as digits and
/// collapses whitespace. Idempotent.
pub fn normalize(answer: &str) -> NormalizedAnswer {
    let lower: Vec<char> = answer.to_lowercase().chars().collect();
    let mut spaced = String::with_capacity(lower.len());
    for (i, &c) in lower.iter().enumerate() {
        let decimal_point =
            c == '.' && i > 0 && lower[i - 1].is_ascii_digit() && lower.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if c.is_ascii_punctuation() && !decimal_point {
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    let words: Vec<&str> = spaced
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .map(|w| {
            NUMBER_WORDS
                .iter()
                .find(|(word, _)| *word == w)
                .map_or(w, |(_, digit)| *digit)
        })
        .collect();
    NormalizedAnswer(words.join(" "))
}

pub fn normalize_str(answer: &str) -> String {
    normalize(answer).into_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricVariant {
    #[default]
    LeaveOneOut,
    Direct,
}

impl fmt::Display for MetricVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricVariant::LeaveOneOut => "leave_one_out",
            MetricVariant::Direct => "direct",
        })
    }
}

impl FromStr for MetricVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leave_one_out" => Ok(MetricVariant::LeaveOneOut),
            "direct" => Ok(MetricVariant::Direct),
            other => Err(Error::input(format!("unknown metric variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub test_id: String,
    pub accuracy: f64,
    pub matched_humans: usize,
}

/// Soft accuracy of one prediction against exactly ten normalized human answers.
/// Returns `(accuracy, matched_humans)`.
pub fn soft_accuracy(
    prediction: &NormalizedAnswer,
    humans: &[NormalizedAnswer],
    variant: MetricVariant,
) -> Result<(f64, usize)> {
    if humans.len() != HUMAN_ANSWERS {
        return Err(Error::input(format!(
            "soft accuracy needs {HUMAN_ANSWERS} human answers, got {}",
            humans.len()
        )));
    }
    let matched = humans.iter().filter(|h| *h == prediction).count();
    let accuracy = match variant {
        // Sum in units of 1/3 so the result is a single correctly rounded division.
        MetricVariant::LeaveOneOut => {
            let thirds: usize = humans
                .iter()
                .map(|h| {
                    let others = matched - usize::from(h == prediction);
                    others.min(3)
                })
                .sum();
            thirds as f64 / (3 * HUMAN_ANSWERS) as f64
        }
        MetricVariant::Direct => matched.min(3) as f64 / 3.0,
    };
    Ok((accuracy, matched))
}

/// Mean accuracy as a percentage. `None` for an empty list.
pub fn aggregate(scores: &[SampleScore]) -> Option<f64> {
    if scores.is_empty() {
        return None;
    }
    let sum: f64 = scores.iter().map(|s| s.accuracy).sum();
    Some(sum / scores.len() as f64 * 100.0)
}

/// Ground truth needed for scoring one test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    #[serde(default)]
    pub human_answers: Vec<String>,
    #[serde(default)]
    pub question_type: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    pub accuracy_pct: f64,
    pub n_scored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// `None` when nothing could be scored.
    pub accuracy_pct: Option<f64>,
    pub n_scored: usize,
    pub n_skipped: usize,
    /// Scored samples whose ensemble produced no answer (all queries failed); they score 0.
    pub n_failed: usize,
    pub metric_variant: MetricVariant,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_type: BTreeMap<String, TypeAccuracy>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<SkippedSample>,
}

/// Scores `predictions` against `dataset`.
///
/// Dataset samples without human answers, or without a prediction, are
/// skipped and listed in the summary. Scores come back sorted by test id.
pub fn evaluate(
    predictions: &[PredictionRecord],
    dataset: &[EvalItem],
    variant: MetricVariant,
) -> Result<(Vec<SampleScore>, EvalSummary)> {
    let by_id: HashMap<&str, &PredictionRecord> = predictions.iter().map(|p| (p.test_id.as_str(), p)).collect();
    let mut items: Vec<&EvalItem> = dataset.iter().collect();
    items.sort_by(|a, b| a.id.cmp(&b.id));

    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    let mut n_failed = 0;
    let mut typed: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for item in items {
        if item.human_answers.is_empty() {
            skipped.push(SkippedSample {
                id: item.id.clone(),
                reason: "no human answers".into(),
            });
            continue;
        }
        let Some(pred) = by_id.get(item.id.as_str()) else {
            skipped.push(SkippedSample {
                id: item.id.clone(),
                reason: "no prediction".into(),
            });
            continue;
        };
        let (accuracy, matched_humans) = match &pred.voted_answer {
            Some(answer) => {
                let humans: Vec<NormalizedAnswer> = item.human_answers.iter().map(|h| normalize(h)).collect();
                soft_accuracy(&normalize(answer), &humans, variant)
                    .map_err(|e| Error::input(format!("sample {:?}: {e}", item.id)))?
            }
            None => {
                n_failed += 1;
                (0.0, 0)
            }
        };
        if let Some(t) = &item.question_type {
            typed.entry(t.clone()).or_default().push(accuracy);
        }
        scores.push(SampleScore {
            test_id: item.id.clone(),
            accuracy,
            matched_humans,
        });
    }
    let per_type = typed
        .into_iter()
        .map(|(t, accs)| {
            let n = accs.len();
            let pct = accs.iter().sum::<f64>() / n as f64 * 100.0;
            (
                t,
                TypeAccuracy {
                    accuracy_pct: pct,
                    n_scored: n,
                },
            )
        })
        .collect();
    let summary = EvalSummary {
        accuracy_pct: aggregate(&scores),
        n_scored: scores.len(),
        n_skipped: skipped.len(),
        n_failed,
        metric_variant: variant,
        per_type,
        skipped,
    };
    Ok((scores, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn humans(matching: usize) -> Vec<NormalizedAnswer> {
        (0..10)
            .map(|i| normalize(if i < matching { "dog" } else { "cat" }))
            .collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("The Dog.").as_str(), "dog");
        assert_eq!(normalize("two").as_str(), "2");
        assert_eq!(normalize("dog").as_str(), "dog");
        assert_eq!(normalize("  A   hot-dog! ").as_str(), "hot dog");
        assert_eq!(normalize("3.5 inches").as_str(), "3.5 inches");
        assert_eq!(normalize("end.").as_str(), "end");
        assert_eq!(normalize("").as_str(), "");
    }

    #[test]
    fn soft_accuracy_examples() {
        let dog = normalize("dog");
        let loo = MetricVariant::LeaveOneOut;
        assert_eq!(soft_accuracy(&dog, &humans(0), loo).unwrap(), (0.0, 0));
        assert_eq!(soft_accuracy(&dog, &humans(10), loo).unwrap(), (1.0, 10));
        // 3 subsets keep 2 matches (2/3 each), 7 keep 3 (1 each)
        assert_eq!(soft_accuracy(&dog, &humans(3), loo).unwrap().0, 0.9);
        assert_eq!(
            soft_accuracy(&dog, &humans(1), MetricVariant::Direct).unwrap().0,
            1.0 / 3.0
        );
    }

    #[test]
    fn soft_accuracy_needs_ten() {
        let dog = normalize("dog");
        assert!(soft_accuracy(&dog, &humans(10)[..9], MetricVariant::LeaveOneOut).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let s = |a: f64| SampleScore {
            test_id: String::new(),
            accuracy: a,
            matched_humans: 0,
        };
        assert_eq!(aggregate(&[s(1.0), s(0.0)]), Some(50.0));
        assert!((aggregate(&[s(0.9)]).unwrap() - 90.0).abs() < 1e-9);
        assert!((aggregate(&[s(0.9), s(0.6), s(0.3)]).unwrap() - 60.0).abs() < 1e-9);
        assert_eq!(aggregate(&[]), None);
    }

    #[test]
    fn evaluate_counts_missing_prediction_as_skipped() {
        let pred = PredictionRecord {
            test_id: "a".into(),
            raw_generations: vec![Some("dog".into())],
            extracted: vec![Some("dog".into())],
            normalized: vec![Some("dog".into())],
            voted_answer: Some("dog".into()),
            vote_counts: BTreeMap::from([("dog".into(), 1)]),
            failed_queries: 0,
        };
        let item = |id: &str| EvalItem {
            id: id.into(),
            human_answers: vec!["dog".into(); 10],
            question_type: Some("animals".into()),
        };
        let (scores, summary) = evaluate(&[pred], &[item("a"), item("b")], MetricVariant::LeaveOneOut).unwrap();
        assert_eq!(scores.len(), 1);
        assert_eq!(summary.n_scored, 1);
        assert_eq!(summary.n_skipped, 1);
        assert_eq!(summary.skipped[0].id, "b");
        assert_eq!(summary.accuracy_pct, Some(100.0));
        assert_eq!(summary.per_type["animals"].n_scored, 1);
    }
}
