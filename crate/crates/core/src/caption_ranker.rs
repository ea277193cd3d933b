//! Top-m caption selection by image-caption cosine similarity.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embedding_store::{cosine, CaptionCandidate, EmbeddingVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCaption {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCaptions {
    pub sample_id: String,
    pub captions: Vec<ScoredCaption>,
    pub m: usize,
}

impl RankedCaptions {
    /// Wraps an already-ordered caption list (stored train captions, generic
    /// captions), keeping its first `m` entries. Scores are unknown and left at 0.
    pub fn from_prefix(sample_id: &str, captions: &[String], m: usize) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            captions: captions
                .iter()
                .take(m)
                .map(|t| ScoredCaption {
                    text: t.clone(),
                    score: 0.0,
                })
                .collect(),
            m,
        }
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.captions.iter().map(|c| c.text.as_str())
    }
}

/// Ranks `candidates` by cosine similarity to `image_emb` and keeps the top `m`.
///
/// Byte-equal captions collapse to their highest-scoring copy. Ordering is
/// score descending with ties broken by original candidate index.
pub fn rank_captions(
    sample_id: &str,
    candidates: &[CaptionCandidate],
    image_emb: &EmbeddingVector,
    m: usize,
) -> Result<RankedCaptions> {
    if m == 0 {
        return Err(Error::input("m must be at least 1"));
    }
    if candidates.is_empty() {
        return Err(Error::input(format!("sample {sample_id:?} has no candidate captions")));
    }
    let scores = candidates
        .iter()
        .map(|c| cosine(&c.emb, image_emb))
        .collect::<Result<Vec<_>>>()?;
    let texts: Vec<&str> = candidates.iter().map(|c| c.text.as_str()).collect();
    let order = top_m_order(&texts, &scores, m);
    Ok(RankedCaptions {
        sample_id: sample_id.to_string(),
        captions: order
            .into_iter()
            .map(|i| ScoredCaption {
                text: candidates[i].text.clone(),
                score: scores[i],
            })
            .collect(),
        m,
    })
}

/// Indices of the surviving candidates in rank order, after dedup, truncated to `m`.
pub fn top_m_order(texts: &[&str], scores: &[f64], m: usize) -> Vec<usize> {
    // Best representative per distinct text: highest score, then lowest index.
    let mut best: HashMap<&str, usize> = HashMap::with_capacity(texts.len());
    for (i, &t) in texts.iter().enumerate() {
        best.entry(t)
            .and_modify(|b| {
                if scores[i] > scores[*b] {
                    *b = i;
                }
            })
            .or_insert(i);
    }
    let mut kept: Vec<usize> = best.into_values().collect();
    kept.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    kept.truncate(m);
    kept
}
