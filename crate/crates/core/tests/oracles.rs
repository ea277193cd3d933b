//! Property tests: library functions against brute-force references.

mod common;

use common::oracles;
use kbvqa_core::caption_ranker::top_m_order;
use kbvqa_core::ensemble::majority_vote;
use kbvqa_core::shot_selector::{assign_shots, rank_by_similarity, ShotRanking};
use kbvqa_core::vqa_eval::{aggregate, normalize, normalize_str, soft_accuracy, MetricVariant, SampleScore};
use proptest::prelude::*;

/// Scores on a coarse grid so ties are common.
fn grid_scores(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-8i32..=8).prop_map(|x| f64::from(x) / 8.0), len)
}

fn captions() -> impl Strategy<Value = (Vec<String>, Vec<f64>)> {
    (1usize..14).prop_flat_map(|len| {
        (
            prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]), len)
                .prop_map(|v| v.into_iter().map(String::from).collect::<Vec<_>>()),
            grid_scores(len),
        )
    })
}

fn similarity_instance() -> impl Strategy<Value = (Vec<String>, Vec<f64>, Vec<f64>)> {
    (1usize..25).prop_flat_map(|len| {
        (
            prop::sample::subsequence((0..60).map(|i| format!("tr{i:02}")).collect::<Vec<_>>(), len).prop_shuffle(),
            grid_scores(len),
            grid_scores(len),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn caption_ranking_matches_oracle((texts, scores) in captions(), m in 1usize..16) {
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        prop_assert_eq!(top_m_order(&refs, &scores, m), oracles::caption_top_m(&texts, &scores, m));
    }

    #[test]
    fn caption_prefix_stable((texts, scores) in captions(), m in 1usize..8) {
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let short = top_m_order(&refs, &scores, m);
        let long = top_m_order(&refs, &scores, m + 1);
        prop_assert_eq!(&long[..short.len()], &short[..]);
        let distinct: std::collections::HashSet<_> = short.iter().map(|&i| &texts[i]).collect();
        prop_assert_eq!(distinct.len(), short.len());
    }

    #[test]
    fn avg_sim_matches_oracle((ids, q, v) in similarity_instance(), limit in 0usize..30) {
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let got: Vec<usize> = rank_by_similarity(&refs, &q, &v, Some(limit)).into_iter().map(|(i, _)| i).collect();
        prop_assert_eq!(got, oracles::avg_sim_top(&ids, &q, &v, limit.min(ids.len())));
    }

    #[test]
    fn avg_sim_scale_invariant((ids, q, v) in similarity_instance(), c in prop::sample::select(vec![0.25, 0.5, 2.0, 3.0, 5.0, 7.0])) {
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let order = |q: &[f64], v: &[f64]| -> Vec<usize> {
            rank_by_similarity(&refs, q, v, None).into_iter().map(|(i, _)| i).collect()
        };
        let qs: Vec<f64> = q.iter().map(|x| x * c).collect();
        let vs: Vec<f64> = v.iter().map(|x| x * c).collect();
        prop_assert_eq!(order(&q, &v), order(&qs, &vs));
    }

    #[test]
    fn strided_assignment_matches_oracle(n in 1usize..8, k in 1usize..8, extra in 0usize..5) {
        let ranked: Vec<String> = (0..n * k + extra).map(|i| format!("r{i:03}")).collect();
        let ranking = ShotRanking {
            test_id: "t".into(),
            ranked_train_ids: ranked.clone(),
            strategy_tag: "avg_sim".into(),
            scores: None,
        };
        let a = assign_shots(&ranking, n, k).unwrap();
        prop_assert_eq!(&a.prompts, &oracles::strided(&ranked, n, k));
        // Disjoint, covers exactly the top n*k, best shot of prompt j is rank j.
        let mut all: Vec<&String> = a.prompts.iter().flatten().collect();
        all.sort();
        let top: Vec<&String> = ranked.iter().take(n * k).collect();
        prop_assert_eq!(all, top);
        for (j, p) in a.prompts.iter().enumerate() {
            prop_assert_eq!(p.len(), n);
            prop_assert_eq!(p.last().unwrap(), &ranked[j]);
        }
    }

    #[test]
    fn assignment_rejects_short_rankings(n in 1usize..6, k in 1usize..6) {
        let have = n * k - 1;
        let ranking = ShotRanking {
            test_id: "t".into(),
            ranked_train_ids: (0..have).map(|i| i.to_string()).collect(),
            strategy_tag: "avg_sim".into(),
            scores: None,
        };
        let err = assign_shots(&ranking, n, k).unwrap_err().to_string();
        let expected = format!("need {}, have {}", n * k, have);
        prop_assert!(err.contains(&expected));
    }

    #[test]
    fn vote_matches_mode(answers in prop::collection::vec(prop::sample::select(vec!["dog", "cat", "red", "2", ""]), 0..12)) {
        let owned: Vec<String> = answers.iter().map(|s| s.to_string()).collect();
        let got = majority_vote(&owned);
        prop_assert_eq!(got.as_ref().map(|(w, _)| w.clone()), oracles::mode(&owned));
        if let Some((_, counts)) = got {
            prop_assert_eq!(counts.values().sum::<usize>(), owned.len());
        }
    }

    #[test]
    fn soft_accuracy_matches_enumeration(matches in prop::collection::vec(any::<bool>(), 10)) {
        let humans: Vec<_> = matches.iter().map(|&m| normalize(if m { "dog" } else { "cat" })).collect();
        let (acc, matched) = soft_accuracy(&normalize("dog"), &humans, MetricVariant::LeaveOneOut).unwrap();
        prop_assert_eq!(matched, matches.iter().filter(|&&m| m).count());
        prop_assert_eq!(acc, oracles::ratio_f64(oracles::soft_accuracy_exact(&matches)));
        prop_assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn normalize_idempotent(s in "[ -~]{0,24}|[a-zA-Z .,!?'-]{0,24}|\\PC{0,12}") {
        let once = normalize_str(&s);
        prop_assert_eq!(normalize_str(&once), once.clone());
        prop_assert!(!once.starts_with(' ') && !once.ends_with(' ') && !once.contains("  "));
    }

    #[test]
    fn aggregate_permutation_invariant(acc in prop::collection::vec((0usize..=30).prop_map(|t| t as f64 / 30.0), 1..20), seed in any::<u64>()) {
        let scores: Vec<SampleScore> = acc.iter().enumerate().map(|(i, &a)| SampleScore {
            test_id: i.to_string(),
            accuracy: a,
            matched_humans: 0,
        }).collect();
        let mut shuffled = scores.clone();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let a = aggregate(&scores).unwrap();
        let b = aggregate(&shuffled).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&a));
    }
}

#[test]
fn soft_accuracy_closed_form_all_counts() {
    for count in 0..=10usize {
        let matches: Vec<bool> = (0..10).map(|i| i < count).collect();
        let humans: Vec<_> = matches.iter().map(|&m| normalize(if m { "x" } else { "y" })).collect();
        let (acc, _) = soft_accuracy(&normalize("x"), &humans, MetricVariant::LeaveOneOut).unwrap();
        assert_eq!(
            acc,
            oracles::ratio_f64(oracles::soft_accuracy_exact(&matches)),
            "count {count}"
        );
        let (direct, _) = soft_accuracy(&normalize("x"), &humans, MetricVariant::Direct).unwrap();
        assert_eq!(direct, (count.min(3) as f64) / 3.0);
    }
    let three: Vec<_> = (0..10).map(|i| normalize(if i < 3 { "x" } else { "y" })).collect();
    assert_eq!(
        soft_accuracy(&normalize("x"), &three, MetricVariant::LeaveOneOut)
            .unwrap()
            .0,
        0.9
    );
}

#[test]
fn vote_counts_are_per_answer() {
    let (w, counts) = majority_vote(&["b", "a", "b", "a"]).unwrap();
    assert_eq!(w, "b");
    assert_eq!(
        counts,
        [("a".to_string(), 2), ("b".to_string(), 2)].into_iter().collect()
    );
}
