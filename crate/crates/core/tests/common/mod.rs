//! Independent oracles shared by the integration suites. Nothing here calls
//! into the crate's own transition or value code.

#![allow(dead_code)]

use std::collections::BTreeMap;

use explainer_core::env::{Action, StateId};
use explainer_core::mcts::{plan, SearchParams};
use explainer_core::trace::{Entity, NodeId, RecordedTree, Rule, TerminalKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ROWS: usize = 4;
pub const COLS: usize = 4;
pub const HOLES: [u32; 4] = [5, 7, 11, 12];
pub const GOAL: u32 = 15;

pub fn is_terminal(s: u32) -> bool {
    s == GOAL || HOLES.contains(&s)
}

/// Row/column move for action index 0..4 (Left, Down, Right, Up), clamped.
fn shift(s: u32, a: usize) -> u32 {
    let (r, c) = ((s as usize) / COLS, (s as usize) % COLS);
    let (dr, dc): (i64, i64) = [(0, -1), (1, 0), (0, 1), (-1, 0)][a];
    let r = (r as i64 + dr).clamp(0, ROWS as i64 - 1) as usize;
    let c = (c as i64 + dc).clamp(0, COLS as i64 - 1) as usize;
    (r * COLS + c) as u32
}

/// Slip-rule enumerator: each of the intended direction and its two
/// perpendicular neighbours with probability one third.
pub fn enumerate(s: u32, a: usize) -> BTreeMap<u32, f64> {
    let mut out = BTreeMap::new();
    for d in [(a + 3) % 4, a, (a + 1) % 4] {
        *out.entry(shift(s, d)).or_insert(0.0) += 1.0 / 3.0;
    }
    out
}

/// Brute-force Bellman sweeps to a fixed point; returns `Q[s][a]`.
pub fn brute_force_q(gamma: f64) -> Vec<[f64; 4]> {
    let mut v = [0.0f64; 16];
    loop {
        let mut delta: f64 = 0.0;
        let mut next = v;
        for s in 0..16u32 {
            if is_terminal(s) {
                continue;
            }
            let best = (0..4).map(|a| q_of(&v, s, a, gamma)).fold(f64::MIN, f64::max);
            delta = delta.max((best - v[s as usize]).abs());
            next[s as usize] = best;
        }
        v = next;
        if delta < 1e-14 {
            break;
        }
    }
    (0..16u32)
        .map(|s| {
            if is_terminal(s) {
                [0.0; 4]
            } else {
                [0, 1, 2, 3].map(|a| q_of(&v, s, a, gamma))
            }
        })
        .collect()
}

fn q_of(v: &[f64; 16], s: u32, a: usize, gamma: f64) -> f64 {
    enumerate(s, a)
        .into_iter()
        .map(|(n, p)| {
            let r = if n == GOAL { 1.0 } else { 0.0 };
            let cont = if is_terminal(n) { 0.0 } else { v[n as usize] };
            p * (r + gamma * cont)
        })
        .sum()
}

/// Actions within `tol` of the best Q at `s`.
pub fn greedy_set(q: &[[f64; 4]], s: u32, tol: f64) -> Vec<usize> {
    let best = q[s as usize].iter().copied().fold(f64::MIN, f64::max);
    (0..4).filter(|&a| best - q[s as usize][a] <= tol).collect()
}

/// Checks the statistical invariants directly on the flat arrays.
/// Returns human-readable failures; empty means all hold.
pub fn invariant_failures(tree: &RecordedTree) -> Vec<String> {
    let mut out = Vec::new();
    for n in &tree.nodes {
        let outgoing: u64 = tree.edges.iter().filter(|e| e.owner == n.node_id).map(|e| e.visits).sum();
        if outgoing > n.visits {
            out.push(format!("node {}: edges {outgoing} > visits {}", n.node_id, n.visits));
        }
        // Every simulation through a node either leaves through an edge or
        // ends there: terminals always end, a non-root inner node ends
        // exactly once (the simulation that created it), the root never.
        let ends_here = if n.terminal_kind.is_some() {
            n.visits
        } else if n.parent_node.is_none() {
            0
        } else {
            1
        };
        if n.visits != outgoing + ends_here {
            out.push(format!(
                "node {}: visits {} != edges {outgoing} + leaf ends {ends_here}",
                n.node_id, n.visits
            ));
        }
    }
    for e in &tree.edges {
        let sum: u64 = e.outcome_counts.values().sum();
        if sum != e.visits {
            out.push(format!("edge ({}, {}): outcomes {sum} != N {}", e.owner, e.action, e.visits));
        }
        if e.failure_count > e.visits {
            out.push(format!("edge ({}, {}): failures exceed N", e.owner, e.action));
        }
        if (e.q() * e.visits as f64 - e.value_sum).abs() > 1e-9 {
            out.push(format!("edge ({}, {}): Q*N != W", e.owner, e.action));
        }
        if e.visits > 0 {
            let r = e.failure_count as f64 / e.visits as f64;
            if !(0.0..=1.0).contains(&r) {
                out.push(format!("edge ({}, {}): risk {r}", e.owner, e.action));
            }
        }
    }
    out
}

/// Non-terminal starting states of the default map.
pub fn open_states() -> Vec<u32> {
    (0..16).filter(|&s| !is_terminal(s)).collect()
}

/// A small random tree, deterministic in `i`.
pub fn random_tree(i: u64) -> RecordedTree {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACE0 + i);
    let states = open_states();
    let root = states[rng.gen_range(0..states.len())];
    let params = SearchParams {
        iteration_budget: rng.gen_range(1..600),
        exploration_c: rng.gen_range(0.0..3.0),
        gamma: rng.gen_range(0.5..=1.0),
        rollout_depth_cap: rng.gen_range(0..60),
        seed: rng.gen(),
    };
    plan(&Default::default(), StateId(root), &params).unwrap().1
}

/// One corruption of a single field, with the rule and entity a validator
/// must report for it.
pub struct Fault {
    pub label: &'static str,
    pub entity: Entity,
    pub rule: Rule,
}

pub const FAULT_KINDS: usize = 15;

/// Applies corruption number `kind % FAULT_KINDS` to `tree`, choosing the
/// victim with `rng`. Returns `None` if the tree has no suitable victim.
pub fn inject(tree: &mut RecordedTree, kind: usize, rng: &mut ChaCha8Rng) -> Option<Fault> {
    let inner: Vec<usize> = (0..tree.nodes.len())
        .filter(|&i| tree.nodes[i].parent_node.is_some() && tree.nodes[i].terminal_kind.is_none())
        .collect();
    let non_root: Vec<usize> = (0..tree.nodes.len()).filter(|&i| tree.nodes[i].parent_node.is_some()).collect();
    let pick = |v: &[usize], rng: &mut ChaCha8Rng| (!v.is_empty()).then(|| v[rng.gen_range(0..v.len())]);
    let edge_ix = (!tree.edges.is_empty()).then(|| rng.gen_range(0..tree.edges.len()));
    let edge_entity = |t: &RecordedTree, i: usize| Entity::Edge { owner: t.edges[i].owner, action: t.edges[i].action };
    let node_entity = |t: &RecordedTree, i: usize| Entity::Node { node_id: t.nodes[i].node_id };
    let root_ix = tree.nodes.iter().position(|n| n.parent_node.is_none())?;

    Some(match kind % FAULT_KINDS {
        0 => {
            let i = pick(&non_root, rng)?;
            tree.nodes[i].visits += 1;
            Fault { label: "child visits", entity: node_entity(tree, i), rule: Rule::ChildVisits }
        }
        1 => {
            tree.nodes[root_ix].visits += 1;
            Fault { label: "root visits", entity: node_entity(tree, root_ix), rule: Rule::RootVisits }
        }
        2 => {
            let i = edge_ix?;
            tree.edges[i].visits += 1;
            Fault { label: "edge visits", entity: edge_entity(tree, i), rule: Rule::OutcomeSum }
        }
        3 => {
            let i = edge_ix?;
            tree.edges[i].failure_count = tree.edges[i].visits + 1;
            Fault { label: "failure count", entity: edge_entity(tree, i), rule: Rule::FailureBound }
        }
        4 => {
            let i = edge_ix?;
            tree.edges[i].value_sum = -1.0;
            Fault { label: "value sum", entity: edge_entity(tree, i), rule: Rule::ValueRange }
        }
        5 => {
            let i = pick(&non_root, rng)?;
            tree.nodes[i].depth += 1;
            Fault { label: "depth", entity: node_entity(tree, i), rule: Rule::DepthMismatch }
        }
        6 => {
            let i = pick(&non_root, rng)?;
            tree.nodes[i].state = StateId(99);
            Fault { label: "state range", entity: node_entity(tree, i), rule: Rule::StateRange }
        }
        7 => {
            let i = edge_ix?;
            let key = *tree.edges[i].outcome_counts.keys().next()?;
            *tree.edges[i].outcome_counts.get_mut(&key)? += 1;
            Fault { label: "outcome count", entity: edge_entity(tree, i), rule: Rule::OutcomeSum }
        }
        8 => {
            let i = pick(&inner, rng).unwrap_or(root_ix);
            tree.nodes[i].terminal_kind = Some(TerminalKind::Hole);
            Fault { label: "terminal kind", entity: node_entity(tree, i), rule: Rule::TerminalKindMismatch }
        }
        9 => {
            let i = pick(&non_root, rng)?;
            tree.nodes[i].parent_action = None;
            Fault { label: "parent pair", entity: node_entity(tree, i), rule: Rule::ParentPair }
        }
        10 => {
            tree.format_version += 1;
            Fault { label: "format version", entity: Entity::Tree, rule: Rule::FormatVersion }
        }
        11 => {
            let chosen = tree.metadata.chosen_action;
            tree.metadata.chosen_action = Action::from_index((chosen.index() + 1 + rng.gen_range(0..3)) % 4)?;
            Fault { label: "chosen action", entity: Entity::Metadata, rule: Rule::ChosenAction }
        }
        12 => {
            let i = (0..tree.edges.len()).find(|&i| !tree.edges[i].children.is_empty())?;
            let key = *tree.edges[i].children.keys().next()?;
            tree.edges[i].children.insert(key, NodeId(u64::MAX));
            Fault { label: "child id", entity: edge_entity(tree, i), rule: Rule::ChildMissing }
        }
        13 => {
            let i = edge_ix?;
            tree.edges[i].owner = NodeId(u64::MAX - 1);
            Fault { label: "edge owner", entity: edge_entity(tree, i), rule: Rule::EdgeOwnerMissing }
        }
        _ => {
            tree.metadata.map = tree.metadata.map.replacen('F', "X", 1);
            Fault { label: "map text", entity: Entity::Metadata, rule: Rule::MapText }
        }
    })
}

/// Hole-absorption frequency of `action` at the root, replaying the
/// search's own policy: inside the tree, actions are drawn in proportion to
/// their visit counts (and a simulation stops to roll out with the share of
/// visits that ended at the node); outside, uniform random steps.
pub fn replay_hole_rate(tree: &RecordedTree, action: Action, replays: u64, seed: u64) -> f64 {
    let idx = tree.index();
    let root = tree.root().unwrap();
    let cap = tree.metadata.params.rollout_depth_cap;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut holes = 0u64;
    for _ in 0..replays {
        let mut node = Some(root.node_id);
        let mut state = root.state.0;
        let mut first = Some(action.index());
        let mut rolling = None::<u32>;
        loop {
            if is_terminal(state) {
                if state != GOAL {
                    holes += 1;
                }
                break;
            }
            let a = match (first.take(), node, rolling) {
                (Some(a), _, _) => a,
                (None, Some(id), None) => {
                    let n = idx.node(id).unwrap();
                    let edges = idx.edges_of(id);
                    let mut draw = rng.gen_range(0..n.visits);
                    let mut chosen = None;
                    for (a, e) in edges.iter().enumerate() {
                        if let Some(e) = e {
                            if draw < e.visits {
                                chosen = Some(a);
                                break;
                            }
                            draw -= e.visits;
                        }
                    }
                    match chosen {
                        Some(a) => a,
                        None => {
                            rolling = Some(0);
                            node = None;
                            continue;
                        }
                    }
                }
                _ => {
                    let used = rolling.unwrap_or(0);
                    if used >= cap {
                        break;
                    }
                    rolling = Some(used + 1);
                    rng.gen_range(0..4)
                }
            };
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let dist = enumerate(state, a);
            let mut next = *dist.keys().last().unwrap();
            for (&s, &p) in &dist {
                acc += p;
                if u < acc {
                    next = s;
                    break;
                }
            }
            let act = Action::from_index(a).unwrap();
            node = match (node, rolling) {
                (Some(id), None) => match idx.edge(id, act).and_then(|e| e.children.get(&StateId(next))) {
                    Some(&c) => Some(c),
                    None => {
                        // Left the recorded tree: the search rolled out from here.
                        rolling = Some(0);
                        None
                    }
                },
                _ => None,
            };
            state = next;
        }
    }
    holes as f64 / replays as f64
}
