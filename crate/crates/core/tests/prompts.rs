mod common;

use common::{fixture, fixture_store, read, toy_example};
use kbvqa_core::caption_ranker::RankedCaptions;
use kbvqa_core::embedding_store::TrainExample;
use kbvqa_core::pipeline::{Pipeline, PipelineConfig, Prepared};
use kbvqa_core::prompt_builder::{enforce_budget, render, PromptParts, PromptTemplate, TokenCounter, WordEstimate};
use proptest::prelude::*;

fn golden(name: &str) -> String {
    String::from_utf8(read(&fixture(&format!("golden/{name}")))).unwrap()
}

struct Toy {
    shots: Vec<TrainExample>,
    captions: Vec<RankedCaptions>,
    test_captions: RankedCaptions,
}

const TEST_QUESTION: &str = "what is the dog catching?";

fn toy() -> Toy {
    let shots = vec![
        toy_example(
            "s1",
            "what is the man holding?",
            "umbrella",
            &["a man in the rain", "a man holding an umbrella", "a wet street"],
        ),
        toy_example(
            "s2",
            "what color is the bus?",
            "red",
            &["a red bus on a street", "a double decker bus"],
        ),
    ];
    let captions = shots
        .iter()
        .map(|s| RankedCaptions::from_prefix(&s.id, &s.captions, 2))
        .collect();
    let test_captions = RankedCaptions::from_prefix(
        "t",
        &[
            "a dog jumping in a park".to_string(),
            "a dog catching a frisbee".to_string(),
        ],
        2,
    );
    Toy {
        shots,
        captions,
        test_captions,
    }
}

fn parts(t: &Toy) -> PromptParts {
    let refs: Vec<&TrainExample> = t.shots.iter().collect();
    PromptParts::build(
        &PromptTemplate::default(),
        &refs,
        &t.captions,
        TEST_QUESTION,
        &t.test_captions,
    )
    .unwrap()
}

#[test]
fn golden_two_shots() {
    let t = toy();
    let refs: Vec<&TrainExample> = t.shots.iter().collect();
    let got = render(
        &PromptTemplate::default(),
        &refs,
        &t.captions,
        TEST_QUESTION,
        &t.test_captions,
    )
    .unwrap();
    assert_eq!(got, golden("prompt_n2.txt"));
}

#[test]
fn golden_no_shots() {
    let t = toy();
    let got = render(&PromptTemplate::default(), &[], &[], TEST_QUESTION, &t.test_captions).unwrap();
    assert_eq!(got, golden("prompt_n0.txt"));
    assert!(got.ends_with("A: "));
}

#[test]
fn golden_budget_trim() {
    let t = toy();
    let mut p = parts(&t);
    assert_eq!(WordEstimate.count(&p.assemble()), 89);
    assert_eq!(enforce_budget(&mut p, 80, &WordEstimate), Ok(1));
    assert_eq!(p.assemble(), golden("prompt_budget.txt"));
}

#[test]
fn budget_within_limit_is_identity() {
    let t = toy();
    let mut p = parts(&t);
    let before = p.clone();
    assert_eq!(enforce_budget(&mut p, 89, &WordEstimate), Ok(0));
    assert_eq!(p, before);
}

#[test]
fn budget_below_test_block_rejects() {
    let t = toy();
    let mut p = parts(&t);
    let err = enforce_budget(&mut p, 30, &WordEstimate).unwrap_err();
    assert!(err.to_string().starts_with("budget"), "{err}");
}

/// Charges 100 per line starting with a marked shot's question, 1 otherwise.
struct Heavy;

impl TokenCounter for Heavy {
    fn count(&self, text: &str) -> usize {
        text.lines()
            .map(|l| if l.starts_with("Q: heavy") { 100 } else { 1 })
            .sum()
    }

    fn name(&self) -> &str {
        "heavy"
    }
}

#[test]
fn budget_drops_exactly_the_least_similar() {
    let template = PromptTemplate::default();
    let shots: Vec<TrainExample> = (0..5)
        .map(|i| {
            let q = if i < 2 {
                format!("heavy {i}")
            } else {
                format!("light {i}")
            };
            toy_example(&format!("s{i}"), &q, &format!("ans{i}"), &["c"])
        })
        .collect();
    let refs: Vec<&TrainExample> = shots.iter().collect();
    let caps: Vec<RankedCaptions> = shots
        .iter()
        .map(|s| RankedCaptions::from_prefix(&s.id, &s.captions, 1))
        .collect();
    let tc = RankedCaptions::from_prefix("t", &["x".to_string()], 1);
    let mut p = PromptParts::build(&template, &refs, &caps, "q", &tc).unwrap();
    let full = p.assemble();
    let light = Heavy.count(&full) - 200;
    assert_eq!(enforce_budget(&mut p, light, &Heavy), Ok(2));
    let kept = p.assemble();
    assert!(!kept.contains("ans0") && !kept.contains("ans1"));
    let pos: Vec<usize> = ["ans2", "ans3", "ans4"].iter().map(|a| kept.find(a).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn empty_test_captions_is_input_error() {
    let empty = RankedCaptions::from_prefix("t", &[], 3);
    assert!(render(&PromptTemplate::default(), &[], &[], TEST_QUESTION, &empty).is_err());
}

#[test]
fn tiny_budget_skips_fixture_samples() {
    let store = fixture_store();
    let cfg = PipelineConfig {
        n: 2,
        k: 2,
        m: 3,
        max_tokens: 10,
        ..PipelineConfig::default()
    };
    let p = Pipeline::new(&store, cfg).unwrap();
    for sample in p.samples(None) {
        match p.prepare(sample).unwrap() {
            Prepared::Skipped(s) => assert!(s.reason.starts_with("budget"), "{}", s.reason),
            Prepared::Ready(_) => panic!("{} should not fit", sample.id),
        }
    }
}

#[test]
fn fixture_prompts_have_layout() {
    let store = fixture_store();
    let cfg = PipelineConfig {
        n: 3,
        k: 2,
        m: 4,
        ..PipelineConfig::default()
    };
    let p = Pipeline::new(&store, cfg).unwrap();
    let sample = &store.test[0];
    let Prepared::Ready(b) = p.prepare(sample).unwrap() else {
        panic!("skipped")
    };
    assert_eq!(b.prompts.len(), 2);
    for (prompt, ids) in b.prompts.iter().zip(&b.assignment.prompts) {
        assert!(prompt.starts_with("Please answer the question according to the context.\n===\n"));
        assert!(prompt.ends_with(&format!("Q: {}\nA: ", sample.question)));
        assert_eq!(prompt.matches("\n===\n").count(), 4);
        let answered = prompt.lines().filter(|l| l.starts_with("A: ") && l.len() > 3).count();
        assert_eq!(answered, 3);
        for id in ids {
            assert!(prompt.contains(&store.train_by_id(id).unwrap().answer));
        }
        let first_context = prompt.lines().find(|l| l.starts_with("Context: ")).unwrap();
        assert_eq!(first_context.matches(", ").count(), 3);
    }
}

proptest! {
    #[test]
    fn each_answer_appears_once(n in 0usize..6, m in 1usize..4) {
        let shots: Vec<TrainExample> = (0..n)
            .map(|i| toy_example(&format!("s{i}"), &format!("question {i}?"), &format!("zq{i}x"), &["one", "two", "three"]))
            .collect();
        let refs: Vec<&TrainExample> = shots.iter().collect();
        let caps: Vec<RankedCaptions> = shots.iter().map(|s| RankedCaptions::from_prefix(&s.id, &s.captions, m)).collect();
        let tc = RankedCaptions::from_prefix("t", &["a dog".to_string()], m);
        let a = render(&PromptTemplate::default(), &refs, &caps, "what?", &tc).unwrap();
        let b = render(&PromptTemplate::default(), &refs, &caps, "what?", &tc).unwrap();
        prop_assert_eq!(&a, &b);
        for s in &shots {
            prop_assert_eq!(a.matches(&s.answer).count(), 1);
        }
        prop_assert!(a.ends_with("A: "));
    }

    #[test]
    fn budget_keeps_a_suffix(n in 0usize..8, budget in 0usize..120) {
        let shots: Vec<TrainExample> = (0..n)
            .map(|i| toy_example(&format!("s{i}"), &format!("question {i}?"), &format!("zq{i}x"), &["one two", "three"]))
            .collect();
        let refs: Vec<&TrainExample> = shots.iter().collect();
        let caps: Vec<RankedCaptions> = shots.iter().map(|s| RankedCaptions::from_prefix(&s.id, &s.captions, 2)).collect();
        let tc = RankedCaptions::from_prefix("t", &["a dog".to_string()], 1);
        let mut p = PromptParts::build(&PromptTemplate::default(), &refs, &caps, "what?", &tc).unwrap();
        let original = p.clone();
        match enforce_budget(&mut p, budget, &WordEstimate) {
            Ok(d) => {
                prop_assert_eq!(&p.shots[..], &original.shots[d..]);
                prop_assert_eq!(&p.test, &original.test);
                prop_assert!(WordEstimate.count(&p.assemble()) <= budget);
                if d > 0 {
                    let mut one_more = original.clone();
                    one_more.shots.drain(..d - 1);
                    prop_assert!(WordEstimate.count(&one_more.assemble()) > budget);
                }
            }
            Err(_) => prop_assert!(p.shots.is_empty()),
        }
    }
}
