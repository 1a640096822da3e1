use std::path::Path;

use explainer_core::answerability::{detect, EvidenceThresholds};
use explainer_core::config::ExplainerConfig;
use explainer_core::env::{Action, GridMap};
use explainer_core::eval::{bundled_query_set_dir, bundled_rulebook, run_eval, rulebook_for, QuerySet};
use explainer_core::intent::{parse_intent, resolve_references, QuestionType};
use explainer_core::llm::{deterministic_double, ChatClient, ChatRequest, ResponseFormat, QUESTION_PREFIX};
use explainer_core::querygen::{build_query_set, QueryGenOptions, LEFT_QUESTION, PATH_QUESTION, UP_QUESTION};
use explainer_core::trace::validate_trace;

fn bundled() -> QuerySet {
    QuerySet::load(&bundled_query_set_dir()).expect("bundled query set loads")
}

fn read_tree_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn regenerating_reproduces_golden_files() {
    let set = build_query_set(&GridMap::default(), &QueryGenOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    set.save(dir.path()).unwrap();
    let fresh = read_tree_files(dir.path());
    let golden = read_tree_files(&bundled_query_set_dir());
    assert_eq!(fresh.len(), golden.len());
    for ((fa, a), (fb, b)) in fresh.iter().zip(&golden) {
        assert_eq!(fa, fb);
        assert!(a == b, "{fa} differs from the committed copy");
    }
}

#[test]
fn bundle_shape() {
    let set = bundled();
    assert_eq!(set.samples.len(), 21);
    for t in QuestionType::ALL {
        let n = set.samples.iter().filter(|s| s.ground_truth_intent.question_type == t).count();
        assert!(n >= 2, "{t}: {n}");
    }
    for q in [UP_QUESTION, LEFT_QUESTION, PATH_QUESTION] {
        assert!(set.samples.iter().any(|s| s.question == q), "missing {q}");
    }
    assert!(set.samples.iter().filter(|s| !s.answerable).count() >= 3);
    for tree in set.traces.values() {
        assert!(validate_trace(tree).is_empty());
    }
}

#[test]
fn paper_questions_carry_expected_intents() {
    let set = bundled();
    let find = |q: &str| set.samples.iter().find(|s| s.question == q).unwrap();
    let up = &find(UP_QUESTION).ground_truth_intent;
    assert_eq!(up.question_type, QuestionType::WhyAction);
    assert_eq!(up.target_action.as_deref(), Some("Up"));
    let left = &find(LEFT_QUESTION).ground_truth_intent;
    assert_eq!(left.question_type, QuestionType::WhatIf);
    assert_eq!(left.target_action.as_deref(), Some("Left"));
    let path = find(PATH_QUESTION);
    let p = path.ground_truth_intent.target_path.as_ref().unwrap();
    assert_eq!(p.len(), 2);
    assert_eq!((p[0].action.as_str(), p[1].action.as_str(), p[1].state), ("Right", "Down", None));

    // The second hop is the most frequent outcome of (13, Right) in that trace.
    let tree = set.tree(path).unwrap();
    let resolved = resolve_references(&path.ground_truth_intent, tree).unwrap();
    let root = tree.root().unwrap().node_id;
    let edge = tree.index().edge(root, Action::Right).unwrap();
    let (best, best_count) = edge.most_visited_outcome().unwrap();
    assert!(edge.outcome_counts.values().all(|&c| c <= best_count));
    assert_eq!(resolved.path.unwrap()[1].state, Some(best));
}

#[test]
fn non_answerable_targets_are_weak_in_their_traces() {
    let set = bundled();
    let th = EvidenceThresholds::default();
    for s in set.samples.iter().filter(|s| !s.answerable) {
        let tree = set.tree(s).unwrap();
        let t = s.expansion_target.unwrap();
        let resolved = resolve_references(&s.ground_truth_intent, tree).unwrap();
        let verdict = detect(&resolved, tree, &th);
        let node = verdict.expansion_targets[0].node_id.expect("expandable");
        let n = tree.index().edge(node, t.action).map_or(0, |e| e.visits);
        assert!(n < th.min_edge_visits, "{}: edge N {n}", s.id);
    }
}

#[test]
fn detector_matches_every_annotation() {
    let set = bundled();
    for s in &set.samples {
        let tree = set.tree(s).unwrap();
        let resolved = resolve_references(&s.ground_truth_intent, tree).unwrap();
        let v = detect(&resolved, tree, &EvidenceThresholds::default());
        assert_eq!(v.answerable, s.answerable, "{}", s.id);
        assert_eq!(v.answerable, v.reasons == vec![explainer_core::answerability::ReasonCode::Ok]);
        if let Some(t) = s.expansion_target {
            assert_eq!(v.first_target(), Some((t.state, Some(t.action))), "{}", s.id);
        }
    }
}

#[test]
fn double_payloads_are_distinct_and_parse() {
    let set = bundled();
    let double = deterministic_double(bundled_rulebook());
    let mut seen = std::collections::BTreeSet::new();
    for s in &set.samples {
        let req = ChatRequest {
            model: "m".into(),
            system_prompt: String::new(),
            user_message: format!("{QUESTION_PREFIX}{}\n", s.question),
            temperature: 0.0,
            max_tokens: 100,
            response_format: ResponseFormat::StructuredObject,
        };
        let text = double.complete(&req).unwrap().text;
        let parsed = parse_intent(&text, &s.question).unwrap();
        assert_eq!(parsed, s.ground_truth_intent);
        seen.insert(text);
    }
    assert_eq!(seen.len(), set.samples.len());
}

#[test]
fn double_eval_is_perfect_and_repeatable() {
    let set = bundled();
    let client = deterministic_double(rulebook_for(&set.samples));
    let config = ExplainerConfig::default();
    let a = run_eval(&set, &client, &config).unwrap();
    assert!(a.gate_failures().is_empty(), "{}", a.to_text(false));
    assert_eq!(a.answerability.correct, 21);
    let b = run_eval(&set, &client, &config).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.to_text(false), b.to_text(false));
    assert!(a.rows.iter().filter(|r| !r.expected_answerable).all(|r| r.expansion_performed && r.final_answerable));
}
