//! In-context example selection and the strided split into `k` prompts.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding_store::{dot_unit, Store, TestSample};
use crate::error::{Error, Result};
use crate::jsonl::read_jsonl;

/// How the shot ranking for a test sample is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Strategy {
    /// Mean of question-question and image-image cosine similarity.
    AvgSim,
    Random {
        seed: u64,
    },
    /// Orderings read from a neighbor file (e.g. a VQA model's latent space).
    Precomputed,
}

impl Strategy {
    pub fn tag(&self) -> &'static str {
        match self {
            Strategy::AvgSim => "avg_sim",
            Strategy::Random { .. } => "random",
            Strategy::Precomputed => "precomputed",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Random { seed } => write!(f, "random(seed={seed})"),
            other => f.write_str(other.tag()),
        }
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Accepts `avg_sim`, `precomputed`, `random` (seed 0), `random:7` and `random(seed=7)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "avg_sim" => return Ok(Strategy::AvgSim),
            "precomputed" | "mcan" => return Ok(Strategy::Precomputed),
            "random" => return Ok(Strategy::Random { seed: 0 }),
            _ => {}
        }
        let seed = s
            .strip_prefix("random:")
            .or_else(|| {
                s.strip_prefix("random(")
                    .and_then(|r| r.strip_suffix(')'))
                    .map(|r| r.trim().strip_prefix("seed=").unwrap_or(r).trim())
            })
            .ok_or_else(|| Error::input(format!("unknown shot strategy {s:?}")))?;
        seed.parse()
            .map(|seed| Strategy::Random { seed })
            .map_err(|_| Error::input(format!("bad random seed in {s:?}")))
    }
}

/// Train ids for one test sample, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotRanking {
    pub test_id: String,
    pub ranked_train_ids: Vec<String>,
    pub strategy_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

/// `k` disjoint shot lists of `n` train ids each, least similar first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotAssignment {
    pub test_id: String,
    pub prompts: Vec<Vec<String>>,
}

/// Ranks train examples by `(cos(q_test, q_i) + cos(v_test, v_i)) / 2`.
///
/// Keeps the best `limit` entries (all when `None`). Ties go to the
/// lexicographically smaller train id.
pub fn rank_avg_sim(test: &TestSample, store: &Store, limit: Option<usize>) -> Result<ShotRanking> {
    if store.train.is_empty() {
        return Err(Error::input("train store is empty"));
    }
    let q = test.question_emb.as_ref().ok_or_else(|| {
        Error::input(format!(
            "test sample {:?} has no question_emb_id; avg_sim needs one",
            test.id
        ))
    })?;
    for v in [q, &test.image_emb] {
        if v.dim() != store.dim {
            return Err(Error::DimensionMismatch {
                expected: store.dim,
                actual: v.dim(),
            });
        }
    }
    let ids: Vec<&str> = store.train.iter().map(|t| t.id.as_str()).collect();
    let q_sims: Vec<f64> = store
        .train
        .iter()
        .map(|t| dot_unit(q.values(), t.question_emb.values()))
        .collect();
    let v_sims: Vec<f64> = store
        .train
        .iter()
        .map(|t| dot_unit(test.image_emb.values(), t.image_emb.values()))
        .collect();
    let ranked = rank_by_similarity(&ids, &q_sims, &v_sims, limit);
    Ok(ShotRanking {
        test_id: test.id.clone(),
        ranked_train_ids: ranked.iter().map(|&(i, _)| ids[i].to_string()).collect(),
        strategy_tag: Strategy::AvgSim.to_string(),
        scores: Some(ranked.into_iter().map(|(_, s)| s).collect()),
    })
}

/// Core of [`rank_avg_sim`] over precomputed similarity components.
/// Returns `(index, averaged score)` pairs, best first.
pub fn rank_by_similarity(
    ids: &[&str],
    question_sims: &[f64],
    image_sims: &[f64],
    limit: Option<usize>,
) -> Vec<(usize, f64)> {
    assert_eq!(ids.len(), question_sims.len());
    assert_eq!(ids.len(), image_sims.len());
    let scores: Vec<f64> = question_sims
        .iter()
        .zip(image_sims)
        .map(|(q, v)| (q + v) / 2.0)
        .collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then_with(|| ids[*a].cmp(ids[*b]));
    let mut order: Vec<usize> = (0..ids.len()).collect();
    let keep = limit.unwrap_or(ids.len()).min(ids.len());
    if keep > 0 && keep < order.len() {
        order.select_nth_unstable_by(keep - 1, cmp);
    }
    order.truncate(keep);
    order.sort_by(cmp);
    order.into_iter().map(|i| (i, scores[i])).collect()
}

/// Seeded permutation of every train id. Depends only on the seed, the test
/// id and the store fingerprint.
pub fn rank_random(test_id: &str, store: &Store, seed: u64) -> Result<ShotRanking> {
    if store.train.is_empty() {
        return Err(Error::input("train store is empty"));
    }
    let mut ids: Vec<String> = store.train.iter().map(|t| t.id.clone()).collect();
    ids.sort_unstable();
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(test_id.as_bytes());
    hasher.update([0u8]);
    hasher.update(store.manifest.fingerprint.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    ids.shuffle(&mut rng);
    Ok(ShotRanking {
        test_id: test_id.to_string(),
        ranked_train_ids: ids,
        strategy_tag: Strategy::Random { seed }.to_string(),
        scores: None,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeighborEntry {
    pub test_id: String,
    pub train_ids: Vec<String>,
}

/// Precomputed neighbor orderings keyed by test id.
#[derive(Debug, Clone, Default)]
pub struct NeighborFile {
    entries: HashMap<String, Vec<String>>,
}

impl NeighborFile {
    pub fn load(path: &Path) -> Result<Self> {
        let rows: Vec<NeighborEntry> = read_jsonl(path)?;
        Self::from_entries(rows)
    }

    pub fn from_entries(rows: Vec<NeighborEntry>) -> Result<Self> {
        let mut entries = HashMap::with_capacity(rows.len());
        for row in rows {
            if entries.insert(row.test_id.clone(), row.train_ids).is_some() {
                return Err(Error::input(format!(
                    "neighbor file lists test id {:?} twice",
                    row.test_id
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn contains(&self, test_id: &str) -> bool {
        self.entries.contains_key(test_id)
    }
}

/// Stored ordering for `test_id`, verbatim. `Ok(None)` when the file has no
/// entry (the caller skips the sample); unknown or repeated train ids are fatal.
pub fn rank_precomputed(test_id: &str, neighbors: &NeighborFile, store: &Store) -> Result<Option<ShotRanking>> {
    let Some(ids) = neighbors.entries.get(test_id) else {
        return Ok(None);
    };
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if store.train_by_id(id).is_none() {
            return Err(Error::input(format!(
                "neighbor entry for {test_id:?} references unknown train id {id:?}"
            )));
        }
        if !seen.insert(id.as_str()) {
            return Err(Error::input(format!(
                "neighbor entry for {test_id:?} repeats train id {id:?}"
            )));
        }
    }
    Ok(Some(ShotRanking {
        test_id: test_id.to_string(),
        ranked_train_ids: ids.clone(),
        strategy_tag: Strategy::Precomputed.to_string(),
        scores: None,
    }))
}

/// Round-robin split of the top `k * n` ranks: prompt `j` gets ranks
/// `j, j + k, ..., j + (n - 1) k`, listed worst first so the best shot sits
/// next to the test input.
pub fn assign_shots(ranking: &ShotRanking, n: usize, k: usize) -> Result<ShotAssignment> {
    if n == 0 || k == 0 {
        return Err(Error::input(format!("n and k must be positive (n={n}, k={k})")));
    }
    let need = n * k;
    let have = ranking.ranked_train_ids.len();
    if have < need {
        return Err(Error::input(format!(
            "not enough in-context examples for {}: need {need}, have {have}",
            ranking.test_id
        )));
    }
    let prompts = (0..k)
        .map(|j| {
            (0..n)
                .rev()
                .map(|i| ranking.ranked_train_ids[j + i * k].clone())
                .collect()
        })
        .collect();
    Ok(ShotAssignment {
        test_id: ranking.test_id.clone(),
        prompts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranking(ids: &[&str]) -> ShotRanking {
        ShotRanking {
            test_id: "t".into(),
            ranked_train_ids: ids.iter().map(|s| s.to_string()).collect(),
            strategy_tag: "avg_sim".into(),
            scores: None,
        }
    }

    #[test]
    fn single_prompt_reverses_top_n() {
        let a = assign_shots(&ranking(&["a", "b", "c", "d"]), 3, 1).unwrap();
        assert_eq!(a.prompts, vec![vec!["c", "b", "a"]]);
    }

    #[test]
    fn strided_two_by_two() {
        let a = assign_shots(&ranking(&["a", "b", "c", "d"]), 2, 2).unwrap();
        assert_eq!(a.prompts, vec![vec!["c", "a"], vec!["d", "b"]]);
    }

    #[test]
    fn insufficient_examples() {
        let err = assign_shots(&ranking(&["a", "b", "c", "d", "e"]), 3, 2).unwrap_err();
        assert!(err.to_string().contains("need 6, have 5"), "{err}");
    }

    #[test]
    fn averaged_scores_hand_computed() {
        // (1.0 + 0.0) / 2 = 0.5 and (0.4 + 0.8) / 2 = 0.6
        let r = rank_by_similarity(&["t1", "t2"], &[1.0, 0.4], &[0.0, 0.8], None);
        assert_eq!(r[0].0, 1);
        assert!((r[0].1 - 0.6).abs() < 1e-12);
        assert!((r[1].1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn all_zero_falls_back_to_lexicographic() {
        let r = rank_by_similarity(&["c", "a", "b"], &[0.0; 3], &[0.0; 3], None);
        assert_eq!(r.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 2, 0]);
    }

    #[test]
    fn limit_matches_full_sort_prefix() {
        let ids = ["e", "d", "c", "b", "a"];
        let q = [0.1, 0.9, 0.9, 0.3, 0.5];
        let v = [0.2, 0.1, 0.1, 0.3, 0.5];
        let full = rank_by_similarity(&ids, &q, &v, None);
        let top = rank_by_similarity(&ids, &q, &v, Some(3));
        assert_eq!(&full[..3], &top[..]);
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("avg_sim".parse::<Strategy>().unwrap(), Strategy::AvgSim);
        assert_eq!(
            "random(seed=7)".parse::<Strategy>().unwrap(),
            Strategy::Random { seed: 7 }
        );
        assert_eq!("random:3".parse::<Strategy>().unwrap(), Strategy::Random { seed: 3 });
        assert_eq!("precomputed".parse::<Strategy>().unwrap(), Strategy::Precomputed);
        assert!("nearest".parse::<Strategy>().is_err());
        assert_eq!(Strategy::Random { seed: 7 }.to_string(), "random(seed=7)");
    }
}
