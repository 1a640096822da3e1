mod common;

use explainer_core::answerability::{detect, EvidenceThresholds};
use explainer_core::env::{Action, GridMap, StateId};
use explainer_core::eval::{bundled_query_set_dir, QuerySet};
use explainer_core::expansion::{expand_targeted, ExpansionRequest};
use explainer_core::intent::resolve_references;
use explainer_core::mcts::{plan, replay_original, Planner, SearchParams, UNSET_TIMESTAMP};
use explainer_core::trace::{validate_trace, RecordedTree};
use proptest::prelude::*;

fn params() -> impl Strategy<Value = (u32, SearchParams)> {
    (
        prop::sample::select(common::open_states()),
        1u64..700,
        0.0f64..3.0,
        0.5f64..=1.0,
        0u32..80,
        any::<u64>(),
    )
        .prop_map(|(root, budget, c, gamma, cap, seed)| {
            (
                root,
                SearchParams { iteration_budget: budget, exploration_c: c, gamma, rollout_depth_cap: cap, seed },
            )
        })
}

fn planned(root: u32, p: &SearchParams) -> RecordedTree {
    plan(&GridMap::default(), StateId(root), p).unwrap().1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn statistical_invariants_hold((root, p) in params()) {
        let tree = planned(root, &p);
        prop_assert_eq!(common::invariant_failures(&tree), Vec::<String>::new());
        prop_assert!(validate_trace(&tree).is_empty());
        prop_assert_eq!(tree.root().unwrap().visits, p.iteration_budget);
    }

    #[test]
    fn serialization_round_trips_canonically((root, p) in params()) {
        let tree = planned(root, &p);
        let text = tree.to_json().unwrap();
        let back = RecordedTree::from_json(&text).unwrap();
        prop_assert_eq!(&back, &tree);
        prop_assert_eq!(back.to_json().unwrap(), text.clone());
        // Array order in the file does not matter after canonicalization.
        let mut shuffled = tree.clone();
        shuffled.nodes.reverse();
        shuffled.edges.reverse();
        shuffled.canonicalize();
        prop_assert_eq!(shuffled.to_json().unwrap(), text);
    }

    #[test]
    fn planning_resumes_exactly((root, p) in params(), k in 1u64..400, m in 0u64..400) {
        let map = GridMap::default();
        let mut planner = Planner::new(&map, StateId(root), p).unwrap();
        planner.run(k);
        let _ = planner.record(0);
        planner.run(m);
        let resumed = planner.record(0);
        let direct = planned(root, &SearchParams { iteration_budget: k + m, ..p });
        prop_assert_eq!(resumed.to_json().unwrap(), direct.to_json().unwrap());
    }

    #[test]
    fn expansion_preserves_invariants(
        (root, p) in params(),
        pick in any::<prop::sample::Index>(),
        action in prop::option::of(0usize..4),
        budget in 1u64..300,
        seed in any::<u64>(),
    ) {
        let map = GridMap::default();
        let tree = planned(root, &p);
        let open: Vec<_> = tree.nodes.iter().filter(|n| n.terminal_kind.is_none()).collect();
        let target = pick.get(&open).node_id;
        let forced = action.and_then(Action::from_index);
        let before = forced.and_then(|a| tree.index().edge(target, a).map(|e| e.visits)).unwrap_or(0);
        let grown = expand_targeted(&tree, &map, &ExpansionRequest {
            target_node: target,
            forced_action: forced,
            budget,
            seed,
            created_at: UNSET_TIMESTAMP.into(),
        }).unwrap();
        prop_assert_eq!(common::invariant_failures(&grown), Vec::<String>::new());
        prop_assert!(validate_trace(&grown).is_empty(), "{:?}", validate_trace(&grown));
        if let Some(a) = forced {
            prop_assert_eq!(grown.index().edge(target, a).unwrap().visits, before + budget);
        }
        prop_assert_eq!(replay_original(&grown).unwrap(), tree);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Raising either threshold never turns an unanswerable question answerable.
    #[test]
    fn detection_is_monotone_in_thresholds(
        node_a in 1u64..20, node_b in 1u64..20,
        edge_a in 1u64..40, edge_b in 1u64..40,
    ) {
        let set = QuerySet::load(&bundled_query_set_dir()).unwrap();
        let low = EvidenceThresholds { min_node_visits: node_a.min(node_b), min_edge_visits: edge_a.min(edge_b) };
        let high = EvidenceThresholds { min_node_visits: node_a.max(node_b), min_edge_visits: edge_a.max(edge_b) };
        for s in &set.samples {
            let tree = set.tree(s).unwrap();
            let resolved = resolve_references(&s.ground_truth_intent, tree).unwrap();
            if detect(&resolved, tree, &high).answerable {
                prop_assert!(detect(&resolved, tree, &low).answerable, "{}", s.id);
            }
        }
    }
}
