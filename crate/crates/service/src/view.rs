//! Pruned tree views for the explorer.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use explainer_core::env::{Action, StateId};
use explainer_core::trace::{risk, NodeId, RecordedTree, TerminalKind, TraceMetadata};

pub const DEFAULT_VIEW_DEPTH: u32 = 3;
pub const DEFAULT_MIN_VISITS: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeQuery {
    pub rev: Option<u32>,
    pub depth: Option<u32>,
    pub min_visits: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeView {
    pub node_id: NodeId,
    pub state: StateId,
    pub parent_node: Option<NodeId>,
    pub parent_action: Option<Action>,
    pub visits: u64,
    pub depth: u32,
    pub terminal_kind: Option<TerminalKind>,
    /// Children filtered out of this view.
    pub hidden_children: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeView {
    pub owner: NodeId,
    pub action: Action,
    pub visits: u64,
    pub q: f64,
    pub risk: Option<f64>,
    pub failure_count: u64,
    pub outcome_counts: BTreeMap<StateId, u64>,
    /// Only children that pass the filter.
    pub children: BTreeMap<StateId, NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeView {
    pub decision_step: u64,
    pub rev: u32,
    pub revisions: u32,
    pub depth_limit: u32,
    pub min_visits: u64,
    pub total_nodes: usize,
    pub shown_nodes: usize,
    pub metadata: TraceMetadata,
    pub nodes: Vec<NodeView>,
    pub edges: Vec<EdgeView>,
}

/// Keeps nodes within `depth_limit` with at least `min_visits` whose whole
/// ancestry is also kept. The root is always shown.
pub fn prune(tree: &RecordedTree, rev: u32, revisions: u32, depth_limit: u32, min_visits: u64) -> TreeView {
    let root = tree.root().map(|r| r.node_id);
    let mut shown: HashSet<NodeId> = HashSet::new();
    // Sorting by depth visits every parent before its children.
    let mut by_depth: Vec<_> = tree.nodes.iter().collect();
    by_depth.sort_by_key(|n| (n.depth, n.node_id));
    for n in by_depth {
        let keep = Some(n.node_id) == root
            || (n.depth <= depth_limit
                && n.visits >= min_visits
                && n.parent_node.is_some_and(|p| shown.contains(&p)));
        if keep {
            shown.insert(n.node_id);
        }
    }

    let mut edges = Vec::new();
    let mut hidden: BTreeMap<NodeId, usize> = BTreeMap::new();
    for e in tree.edges.iter().filter(|e| shown.contains(&e.owner)) {
        let children: BTreeMap<StateId, NodeId> =
            e.children.iter().filter(|(_, c)| shown.contains(c)).map(|(s, c)| (*s, *c)).collect();
        *hidden.entry(e.owner).or_default() += e.children.len() - children.len();
        edges.push(EdgeView {
            owner: e.owner,
            action: e.action,
            visits: e.visits,
            q: e.q(),
            risk: risk(e).map(|r| r.value),
            failure_count: e.failure_count,
            outcome_counts: e.outcome_counts.clone(),
            children,
        });
    }
    let nodes: Vec<NodeView> = tree
        .nodes
        .iter()
        .filter(|n| shown.contains(&n.node_id))
        .map(|n| NodeView {
            node_id: n.node_id,
            state: n.state,
            parent_node: n.parent_node,
            parent_action: n.parent_action,
            visits: n.visits,
            depth: n.depth,
            terminal_kind: n.terminal_kind,
            hidden_children: hidden.get(&n.node_id).copied().unwrap_or(0),
        })
        .collect();
    TreeView {
        decision_step: tree.metadata.decision_step,
        rev,
        revisions,
        depth_limit,
        min_visits,
        total_nodes: tree.nodes.len(),
        shown_nodes: nodes.len(),
        metadata: tree.metadata.clone(),
        nodes,
        edges,
    }
}
