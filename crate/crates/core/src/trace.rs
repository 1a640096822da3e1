//! Recorded search trees.
//!
//! A [`RecordedTree`] is the persisted form of one planning decision: a flat
//! list of decision nodes and a flat list of action edges, plus metadata
//! describing how the tree was produced. It is the only evidence the
//! explanation pipeline reads.
//!
//! Files are JSON documents with a `format_version` field. Nodes are sorted by
//! `node_id` and edges by `(owner, action)`, so equal trees serialize to equal
//! bytes.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, CellKind, GridMap, StateId};
use crate::mcts::SearchParams;

pub const FORMAT_VERSION: u32 = 1;

/// Name recorded in `metadata.env`.
pub const ENV_NAME: &str = "FrozenLake";

/// File name for the trace of decision step `k`, revision `rev` (0 = as planned).
pub fn trace_file_name(step: u64, rev: u32) -> String {
    if rev == 0 {
        format!("step_{step}.tree")
    } else {
        format!("step_{step}.rev{rev}.tree")
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("unsupported trace format version {0} (expected {FORMAT_VERSION})")]
    FormatVersionUnsupported(u64),
    #[error("schema violation at {path}: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("trace failed validation: {0:?}")]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TerminalKind {
    Goal,
    Hole,
}

impl TerminalKind {
    pub fn of_cell(cell: CellKind) -> Option<TerminalKind> {
        match cell {
            CellKind::Goal => Some(TerminalKind::Goal),
            CellKind::Hole => Some(TerminalKind::Hole),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionNode {
    pub node_id: NodeId,
    pub state: StateId,
    pub parent_node: Option<NodeId>,
    pub parent_action: Option<Action>,
    pub visits: u64,
    pub terminal_kind: Option<TerminalKind>,
    pub depth: u32,
}

impl DecisionNode {
    pub fn is_root(&self) -> bool {
        self.parent_node.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionEdge {
    pub owner: NodeId,
    pub action: Action,
    pub visits: u64,
    /// Sum of discounted returns observed through this edge.
    pub value_sum: f64,
    pub outcome_counts: BTreeMap<StateId, u64>,
    /// Simulations through this edge that ended in a hole.
    pub failure_count: u64,
    pub children: BTreeMap<StateId, NodeId>,
}

impl ActionEdge {
    /// Mean return, zero when unvisited.
    pub fn q(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.value_sum / self.visits as f64
        }
    }

    /// Outcome with the highest count; ties go to the lowest state id.
    pub fn most_visited_outcome(&self) -> Option<(StateId, u64)> {
        self.outcome_counts
            .iter()
            .fold(None, |best: Option<(StateId, u64)>, (&s, &n)| match best {
                Some((_, bn)) if bn >= n => best,
                _ => Some((s, n)),
            })
    }
}

/// Empirical probability that a simulation through an edge ended in a hole.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub value: f64,
    pub support: u64,
}

/// `failure_count / visits`, absent for unvisited edges.
pub fn risk(edge: &ActionEdge) -> Option<RiskEstimate> {
    (edge.visits > 0).then(|| RiskEstimate {
        value: edge.failure_count as f64 / edge.visits as f64,
        support: edge.visits,
    })
}

/// One targeted expansion applied after planning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionRecord {
    pub target_node: NodeId,
    pub forced_action: Option<Action>,
    pub budget: u64,
    pub seed: u64,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceMetadata {
    pub env: String,
    /// Map text, one row per line.
    pub map: String,
    pub decision_step: u64,
    pub params: SearchParams,
    pub chosen_action: Action,
    pub created_at: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub expansions: Vec<ExpansionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordedTree {
    pub format_version: u32,
    pub metadata: TraceMetadata,
    pub nodes: Vec<DecisionNode>,
    pub edges: Vec<ActionEdge>,
}

/// Which node to pick when a state occurs at several nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeScope {
    /// The root if it matches, else the shallowest match (ties: most visits).
    #[default]
    RootFirst,
    MostVisited,
}

/// What a validation violation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Entity {
    Tree,
    Metadata,
    Node { node_id: NodeId },
    Edge { owner: NodeId, action: Action },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rule {
    FormatVersion,
    SingleRoot,
    DuplicateNode,
    StateRange,
    TerminalKindMismatch,
    ParentPair,
    ParentMissing,
    RootDepth,
    DepthMismatch,
    NodeVisits,
    RootVisits,
    ChildVisits,
    ChildLink,
    Orphan,
    VisitAccounting,
    DuplicateEdge,
    EdgeOwnerMissing,
    TerminalEdge,
    OutcomeSum,
    FailureBound,
    ValueRange,
    ChildKeys,
    ChildMissing,
    MapText,
    ChosenAction,
    ExpansionTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub entity: Entity,
    pub rule: Rule,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} {:?}: {}", self.rule, self.entity, self.message)
    }
}

/// Lookup tables over a tree's flat arrays.
pub struct TreeIndex<'t> {
    tree: &'t RecordedTree,
    nodes: HashMap<NodeId, usize>,
    edges: HashMap<(NodeId, Action), usize>,
}

impl<'t> TreeIndex<'t> {
    pub fn new(tree: &'t RecordedTree) -> Self {
        let nodes = tree
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.node_id, i))
            .collect();
        let edges = tree
            .edges
            .iter()
            .enumerate()
            .map(|(i, e)| ((e.owner, e.action), i))
            .collect();
        TreeIndex { tree, nodes, edges }
    }

    pub fn tree(&self) -> &'t RecordedTree {
        self.tree
    }

    pub fn node(&self, id: NodeId) -> Option<&'t DecisionNode> {
        self.nodes.get(&id).map(|&i| &self.tree.nodes[i])
    }

    pub fn edge(&self, owner: NodeId, action: Action) -> Option<&'t ActionEdge> {
        self.edges.get(&(owner, action)).map(|&i| &self.tree.edges[i])
    }

    pub fn edges_of(&self, owner: NodeId) -> [Option<&'t ActionEdge>; 4] {
        Action::ALL.map(|a| self.edge(owner, a))
    }

    /// Action with the most edge visits, then highest mean return, then
    /// lowest index. Falls back to the lowest-indexed action.
    pub fn best_action(&self, owner: NodeId) -> Action {
        best_by_visits(self.edges_of(owner).map(|e| e.map(|e| (e.visits, e.q()))))
    }
}

pub(crate) fn best_by_visits(stats: [Option<(u64, f64)>; 4]) -> Action {
    let mut best: Option<(Action, u64, f64)> = None;
    for a in Action::ALL {
        let Some((n, q)) = stats[a.index()] else { continue };
        if n == 0 {
            continue;
        }
        match best {
            Some((_, bn, bq)) if n < bn || (n == bn && q <= bq) => {}
            _ => best = Some((a, n, q)),
        }
    }
    best.map(|b| b.0).unwrap_or(Action::Left)
}

impl RecordedTree {
    pub fn index(&self) -> TreeIndex<'_> {
        TreeIndex::new(self)
    }

    pub fn root(&self) -> Option<&DecisionNode> {
        self.nodes.iter().find(|n| n.is_root())
    }

    pub fn root_state(&self) -> Option<StateId> {
        self.root().map(|n| n.state)
    }

    pub fn map(&self) -> Result<GridMap, crate::env::EnvError> {
        self.metadata.map.parse()
    }

    /// Recommendation rule applied to the root's edges.
    pub fn best_root_action(&self) -> Action {
        match self.root() {
            Some(root) => self.index().best_action(root.node_id),
            None => Action::Left,
        }
    }

    pub fn max_depth(&self) -> u32 {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn next_node_id(&self) -> NodeId {
        NodeId(self.nodes.iter().map(|n| n.node_id.0 + 1).max().unwrap_or(0))
    }

    /// Distinct states present in the tree, ascending.
    pub fn states(&self) -> Vec<StateId> {
        let mut s: Vec<StateId> = self.nodes.iter().map(|n| n.state).collect();
        s.sort();
        s.dedup();
        s
    }

    /// Sorts nodes and edges into canonical order.
    pub fn canonicalize(&mut self) {
        self.nodes.sort_by_key(|n| n.node_id);
        self.edges.sort_by_key(|e| (e.owner, e.action));
    }

    pub fn find_node(&self, state: StateId, scope: NodeScope) -> Option<NodeId> {
        let matches = self.nodes.iter().filter(|n| n.state == state);
        match scope {
            NodeScope::RootFirst => {
                if let Some(root) = self.root().filter(|r| r.state == state) {
                    return Some(root.node_id);
                }
                matches
                    .min_by(|a, b| {
                        a.depth
                            .cmp(&b.depth)
                            .then(b.visits.cmp(&a.visits))
                            .then(a.node_id.cmp(&b.node_id))
                    })
                    .map(|n| n.node_id)
            }
            NodeScope::MostVisited => matches
                .min_by(|a, b| b.visits.cmp(&a.visits).then(a.node_id.cmp(&b.node_id)))
                .map(|n| n.node_id),
        }
    }

    pub fn to_json(&self) -> Result<String, TraceError> {
        let violations = validate_trace(self);
        if !violations.is_empty() {
            return Err(TraceError::Invalid(violations));
        }
        Ok(self.to_json_unchecked())
    }

    /// Serializes without validating. Used for fault-injection tooling.
    pub fn to_json_unchecked(&self) -> String {
        let mut canonical = self.clone();
        canonical.canonicalize();
        let mut text = serde_json::to_string_pretty(&canonical).expect("trace serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, TraceError> {
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| TraceError::SchemaViolation {
            path: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        match raw.get("format_version").map(|v| v.as_u64()) {
            Some(Some(v)) if v == FORMAT_VERSION as u64 => {}
            Some(Some(v)) => return Err(TraceError::FormatVersionUnsupported(v)),
            _ => {
                return Err(TraceError::SchemaViolation {
                    path: "format_version".into(),
                    message: "missing or not an unsigned integer".into(),
                })
            }
        }
        serde_path_deserialize(raw)
    }
}

fn serde_path_deserialize(raw: serde_json::Value) -> Result<RecordedTree, TraceError> {
    // Report the first offending field with its path.
    let locate = |value: &serde_json::Value| -> String {
        for (key, expect_array) in [("metadata", false), ("nodes", true), ("edges", true)] {
            match value.get(key) {
                None => return key.to_string(),
                Some(v) if expect_array => {
                    let Some(items) = v.as_array() else { return key.to_string() };
                    for (i, item) in items.iter().enumerate() {
                        let ok = if key == "nodes" {
                            serde_json::from_value::<DecisionNode>(item.clone()).is_ok()
                        } else {
                            serde_json::from_value::<ActionEdge>(item.clone()).is_ok()
                        };
                        if !ok {
                            return format!("{key}[{i}]");
                        }
                    }
                }
                Some(v) => {
                    if serde_json::from_value::<TraceMetadata>(v.clone()).is_err() {
                        return key.to_string();
                    }
                }
            }
        }
        "$".to_string()
    };
    serde_json::from_value::<RecordedTree>(raw.clone()).map_err(|e| TraceError::SchemaViolation {
        path: locate(&raw),
        message: e.to_string(),
    })
}

/// Writes a validated tree to `path`.
pub fn save_trace(tree: &RecordedTree, path: &Path) -> Result<(), TraceError> {
    let text = tree.to_json()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Parses a trace file. Structural invariants are not checked here; call
/// [`validate_trace`] for that.
pub fn load_trace(path: &Path) -> Result<RecordedTree, TraceError> {
    let text = fs::read_to_string(path)?;
    RecordedTree::from_json(&text)
}

/// Checks every structural and statistical invariant of a tree.
///
/// Returns one entry per broken rule and entity; an empty list means the
/// tree is consistent.
pub fn validate_trace(tree: &RecordedTree) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |entity: Entity, rule: Rule, message: String| out.push(Violation { entity, rule, message });

    if tree.format_version != FORMAT_VERSION {
        push(Entity::Tree, Rule::FormatVersion, format!("version {}", tree.format_version));
    }
    let map: Option<GridMap> = match tree.metadata.map.parse() {
        Ok(m) => Some(m),
        Err(e) => {
            push(Entity::Metadata, Rule::MapText, e.to_string());
            None
        }
    };

    let mut nodes: HashMap<NodeId, &DecisionNode> = HashMap::new();
    for n in &tree.nodes {
        if nodes.insert(n.node_id, n).is_some() {
            push(Entity::Node { node_id: n.node_id }, Rule::DuplicateNode, "node id repeated".into());
        }
    }
    let mut edges: HashMap<(NodeId, Action), &ActionEdge> = HashMap::new();
    for e in &tree.edges {
        if edges.insert((e.owner, e.action), e).is_some() {
            push(
                Entity::Edge { owner: e.owner, action: e.action },
                Rule::DuplicateEdge,
                "edge repeated".into(),
            );
        }
    }

    let roots: Vec<&DecisionNode> = tree.nodes.iter().filter(|n| n.is_root()).collect();
    if roots.len() != 1 {
        push(Entity::Tree, Rule::SingleRoot, format!("{} root nodes", roots.len()));
    }

    // Extra visits granted to expansion targets beyond what their parent edge recorded.
    let mut expanded: HashMap<NodeId, u64> = HashMap::new();
    for x in &tree.metadata.expansions {
        *expanded.entry(x.target_node).or_default() += x.budget;
        if !nodes.contains_key(&x.target_node) {
            push(
                Entity::Metadata,
                Rule::ExpansionTarget,
                format!("expansion target {} does not exist", x.target_node),
            );
        }
    }

    for n in &tree.nodes {
        let entity = Entity::Node { node_id: n.node_id };
        if let Some(map) = &map {
            match map.cell(n.state) {
                Err(_) => push(entity, Rule::StateRange, format!("state {} outside grid", n.state)),
                Ok(cell) => {
                    if TerminalKind::of_cell(cell) != n.terminal_kind {
                        push(
                            entity,
                            Rule::TerminalKindMismatch,
                            format!("terminal_kind {:?} but cell is {cell:?}", n.terminal_kind),
                        );
                    }
                }
            }
        }
        if n.visits == 0 {
            push(entity, Rule::NodeVisits, "node present with zero visits".into());
        }
        let extra = expanded.get(&n.node_id).copied().unwrap_or(0);
        match (n.parent_node, n.parent_action) {
            (None, None) => {
                if n.depth != 0 {
                    push(entity, Rule::RootDepth, format!("root depth {}", n.depth));
                }
                let expected = tree.metadata.params.iteration_budget + extra;
                if n.visits != expected {
                    push(
                        entity,
                        Rule::RootVisits,
                        format!("root visits {} but budget plus expansions is {expected}", n.visits),
                    );
                }
            }
            (Some(pid), Some(pa)) => match nodes.get(&pid) {
                None => push(entity, Rule::ParentMissing, format!("parent {pid} not found")),
                Some(parent) => {
                    if n.depth != parent.depth + 1 {
                        push(
                            entity,
                            Rule::DepthMismatch,
                            format!("depth {} under parent depth {}", n.depth, parent.depth),
                        );
                    }
                    match edges.get(&(pid, pa)) {
                        None => push(entity, Rule::Orphan, format!("parent edge ({pid}, {pa}) missing")),
                        Some(edge) => {
                            if edge.children.get(&n.state) != Some(&n.node_id) {
                                push(
                                    entity,
                                    Rule::ChildLink,
                                    format!("parent edge does not list this node under state {}", n.state),
                                );
                            }
                            let recorded = edge.outcome_counts.get(&n.state).copied().unwrap_or(0);
                            if n.visits != recorded + extra {
                                push(
                                    entity,
                                    Rule::ChildVisits,
                                    format!(
                                        "visits {} but parent edge recorded {recorded} arrivals (+{extra} expanded)",
                                        n.visits
                                    ),
                                );
                            }
                        }
                    }
                }
            },
            _ => push(entity, Rule::ParentPair, "parent_node and parent_action must both be set or both null".into()),
        }
        let outgoing: u64 = Action::ALL
            .iter()
            .filter_map(|&a| edges.get(&(n.node_id, a)))
            .map(|e| e.visits)
            .sum();
        if outgoing > n.visits {
            push(
                entity,
                Rule::VisitAccounting,
                format!("edges carry {outgoing} visits but node has {}", n.visits),
            );
        }
    }

    for e in &tree.edges {
        let entity = Entity::Edge { owner: e.owner, action: e.action };
        match nodes.get(&e.owner) {
            None => push(entity, Rule::EdgeOwnerMissing, format!("owner {} not found", e.owner)),
            Some(owner) => {
                if owner.terminal_kind.is_some() {
                    push(entity, Rule::TerminalEdge, "terminal node has an outgoing edge".into());
                }
            }
        }
        let sum: u64 = e.outcome_counts.values().sum();
        if sum != e.visits {
            push(entity, Rule::OutcomeSum, format!("outcome counts sum to {sum}, visits {}", e.visits));
        }
        if e.failure_count > e.visits {
            push(
                entity,
                Rule::FailureBound,
                format!("failure_count {} exceeds visits {}", e.failure_count, e.visits),
            );
        }
        // Returns are discounted goal rewards, so each lies in [0, 1].
        if !(e.value_sum.is_finite() && e.value_sum >= 0.0 && e.value_sum <= e.visits as f64 + 1e-9) {
            push(
                entity,
                Rule::ValueRange,
                format!("value_sum {} outside [0, {}]", e.value_sum, e.visits),
            );
        }
        for (state, child) in &e.children {
            if !e.outcome_counts.contains_key(state) {
                push(entity, Rule::ChildKeys, format!("child under state {state} has no outcome count"));
            }
            match nodes.get(child) {
                None => push(entity, Rule::ChildMissing, format!("child {child} not found")),
                Some(c) => {
                    if c.parent_node != Some(e.owner) || c.parent_action != Some(e.action) || c.state != *state {
                        push(entity, Rule::ChildLink, format!("child {child} does not link back"));
                    }
                }
            }
        }
    }

    let root_expanded = roots.first().is_some_and(|r| expanded.contains_key(&r.node_id));
    if roots.len() == 1 && !root_expanded {
        let best = tree.best_root_action();
        if best != tree.metadata.chosen_action {
            push(
                Entity::Metadata,
                Rule::ChosenAction,
                format!("chosen {} but root statistics recommend {best}", tree.metadata.chosen_action),
            );
        }
    }

    out
}
