//! UCT search over the grid world.
//!
//! Each simulation descends from the root with UCB1, samples transitions from
//! the environment model, adds one node when it reaches an outcome not seen
//! before, estimates that node with a uniform-random rollout and backs the
//! discounted return up the path. Stochastic outcomes are stored per edge:
//! an edge keeps a count and a child node for every sampled next state.
//!
//! The search is anytime: a [`Planner`] can be stopped after any number of
//! simulations and resumed later with identical results to an uninterrupted
//! run, because the random stream lives inside the planner.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, EnvError, GridMap, StateId};
use crate::trace::{
    best_by_visits, ActionEdge, DecisionNode, NodeId, RecordedTree, TerminalKind, TraceMetadata,
    ENV_NAME, FORMAT_VERSION,
};

/// Timestamp written by [`plan`]; callers that want wall-clock provenance
/// overwrite `metadata.created_at`.
pub const UNSET_TIMESTAMP: &str = "1970-01-01T00:00:00Z";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("cannot plan from terminal state {0}")]
    TerminalRoot(StateId),
    #[error("simulation path does not start at the search root")]
    PathDetached,
    #[error("invalid search parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchParams {
    pub iteration_budget: u64,
    pub exploration_c: f64,
    pub gamma: f64,
    pub rollout_depth_cap: u32,
    pub seed: u64,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            iteration_budget: 50_000,
            exploration_c: 1.414,
            gamma: 0.99,
            rollout_depth_cap: 100,
            seed: 0,
        }
    }
}

impl SearchParams {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.iteration_budget == 0 {
            return Err(PlanError::InvalidParams("iteration_budget must be at least 1".into()));
        }
        if !(self.exploration_c.is_finite() && self.exploration_c >= 0.0) {
            return Err(PlanError::InvalidParams(format!(
                "exploration_c {} must be finite and non-negative",
                self.exploration_c
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(PlanError::InvalidParams(format!("gamma {} not in (0, 1]", self.gamma)));
        }
        Ok(())
    }
}

/// Per-edge numbers the selection rule needs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EdgeStats {
    pub visits: u64,
    pub value_sum: f64,
}

impl EdgeStats {
    pub fn q(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.value_sum / self.visits as f64
        }
    }
}

/// UCB1 selection. Untried actions come first, lowest index first; otherwise
/// the highest `Q + c * sqrt(ln N / n)` wins, ties to the lowest index.
pub fn select_ucb(parent_visits: u64, edges: &[EdgeStats; 4], c: f64) -> Action {
    if let Some(a) = Action::ALL.into_iter().find(|a| edges[a.index()].visits == 0) {
        return a;
    }
    let ln_n = (parent_visits.max(1) as f64).ln();
    let mut best = Action::Left;
    let mut best_score = f64::NEG_INFINITY;
    for a in Action::ALL {
        let e = edges[a.index()];
        let score = e.q() + c * (ln_n / e.visits as f64).sqrt();
        if score > best_score {
            best = a;
            best_score = score;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EndKind {
    Goal,
    Hole,
    /// The rollout ran out of steps.
    DepthCap,
    /// No rollout was performed (cap of zero).
    Leaf,
}

impl From<TerminalKind> for EndKind {
    fn from(k: TerminalKind) -> Self {
        match k {
            TerminalKind::Goal => EndKind::Goal,
            TerminalKind::Hole => EndKind::Hole,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutResult {
    pub value: f64,
    pub end: EndKind,
    pub steps: u32,
}

/// Uniform-random rollout from `state`.
///
/// Each step draws the action with `rng.gen_range(0..4usize)` and then samples
/// the transition. Terminal start states and a zero cap return 0.
pub fn rollout_detailed<R: Rng + ?Sized>(
    map: &GridMap,
    state: StateId,
    params: &SearchParams,
    rng: &mut R,
) -> RolloutResult {
    if let Ok(cell) = map.cell(state) {
        if let Some(kind) = TerminalKind::of_cell(cell) {
            return RolloutResult { value: 0.0, end: kind.into(), steps: 0 };
        }
    }
    if params.rollout_depth_cap == 0 {
        return RolloutResult { value: 0.0, end: EndKind::Leaf, steps: 0 };
    }
    let mut state = state;
    let mut discount = 1.0;
    let mut value = 0.0;
    for step in 0..params.rollout_depth_cap {
        let action = Action::ALL[rng.gen_range(0..4usize)];
        let o = map
            .sample_transition(state, action, rng)
            .expect("rollout only steps from non-terminal states");
        value += discount * o.reward;
        discount *= params.gamma;
        state = o.next_state;
        if o.terminal {
            let end = if o.reward > 0.0 { EndKind::Goal } else { EndKind::Hole };
            return RolloutResult { value, end, steps: step + 1 };
        }
    }
    RolloutResult { value, end: EndKind::DepthCap, steps: params.rollout_depth_cap }
}

pub fn rollout<R: Rng + ?Sized>(map: &GridMap, state: StateId, params: &SearchParams, rng: &mut R) -> f64 {
    rollout_detailed(map, state, params, rng).value
}

/// Arena index of a node inside a [`SearchTree`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeRef(pub usize);

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub node_id: NodeId,
    pub state: StateId,
    pub parent: Option<(NodeRef, Action)>,
    pub visits: u64,
    pub terminal_kind: Option<TerminalKind>,
    pub depth: u32,
    edges: [Option<usize>; 4],
}

#[derive(Debug, Clone)]
pub struct OutcomeSlot {
    pub state: StateId,
    pub count: u64,
    pub child: Option<NodeRef>,
}

#[derive(Debug, Clone)]
pub struct TreeEdge {
    pub owner: NodeRef,
    pub action: Action,
    pub visits: u64,
    pub value_sum: f64,
    pub failure_count: u64,
    pub outcomes: Vec<OutcomeSlot>,
}

impl TreeEdge {
    fn stats(&self) -> EdgeStats {
        EdgeStats { visits: self.visits, value_sum: self.value_sum }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathStep {
    pub node: NodeRef,
    pub action: Action,
    pub next_state: StateId,
    pub reward: f64,
}

/// The route one simulation took through the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationPath {
    pub steps: Vec<PathStep>,
    /// Node the simulation stopped at.
    pub leaf: NodeRef,
    pub end: EndKind,
}

/// Mutable arena form of a search tree.
#[derive(Debug, Clone)]
pub struct SearchTree {
    nodes: Vec<TreeNode>,
    edges: Vec<TreeEdge>,
    root: NodeRef,
    next_id: u64,
}

impl SearchTree {
    pub fn new(map: &GridMap, root_state: StateId) -> Result<Self, PlanError> {
        let cell = map.cell(root_state)?;
        if cell.is_terminal() {
            return Err(PlanError::TerminalRoot(root_state));
        }
        Ok(SearchTree {
            nodes: vec![TreeNode {
                node_id: NodeId(0),
                state: root_state,
                parent: None,
                visits: 0,
                terminal_kind: None,
                depth: 0,
                edges: [None; 4],
            }],
            edges: Vec::new(),
            root: NodeRef(0),
            next_id: 1,
        })
    }

    /// Loads a recorded tree with `local_root` as the search root. New nodes
    /// get ids above every existing id.
    pub fn from_recorded(tree: &RecordedTree, local_root: NodeId) -> Option<Self> {
        let refs: HashMap<NodeId, NodeRef> = tree
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.node_id, NodeRef(i)))
            .collect();
        let mut nodes: Vec<TreeNode> = tree
            .nodes
            .iter()
            .map(|n| TreeNode {
                node_id: n.node_id,
                state: n.state,
                parent: match (n.parent_node, n.parent_action) {
                    (Some(p), Some(a)) => refs.get(&p).map(|&r| (r, a)),
                    _ => None,
                },
                visits: n.visits,
                terminal_kind: n.terminal_kind,
                depth: n.depth,
                edges: [None; 4],
            })
            .collect();
        let mut edges = Vec::with_capacity(tree.edges.len());
        for e in &tree.edges {
            let owner = *refs.get(&e.owner)?;
            let outcomes = e
                .outcome_counts
                .iter()
                .map(|(&s, &count)| OutcomeSlot {
                    state: s,
                    count,
                    child: e.children.get(&s).and_then(|c| refs.get(c).copied()),
                })
                .collect();
            nodes[owner.0].edges[e.action.index()] = Some(edges.len());
            edges.push(TreeEdge {
                owner,
                action: e.action,
                visits: e.visits,
                value_sum: e.value_sum,
                failure_count: e.failure_count,
                outcomes,
            });
        }
        let root = *refs.get(&local_root)?;
        Some(SearchTree { nodes, edges, root, next_id: tree.next_node_id().0 })
    }

    pub fn root(&self) -> NodeRef {
        self.root
    }

    pub fn node(&self, r: NodeRef) -> &TreeNode {
        &self.nodes[r.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edge(&self, node: NodeRef, action: Action) -> Option<&TreeEdge> {
        self.nodes[node.0].edges[action.index()].map(|i| &self.edges[i])
    }

    pub fn edge_stats(&self, node: NodeRef) -> [EdgeStats; 4] {
        Action::ALL.map(|a| self.edge(node, a).map(TreeEdge::stats).unwrap_or_default())
    }

    pub fn child(&self, node: NodeRef, action: Action, next: StateId) -> Option<NodeRef> {
        self.edge(node, action)?
            .outcomes
            .iter()
            .find(|o| o.state == next)
            .and_then(|o| o.child)
    }

    /// Recommendation at `node`: most visits, then highest Q, then lowest index.
    pub fn best_action(&self, node: NodeRef) -> Action {
        best_by_visits(Action::ALL.map(|a| self.edge(node, a).map(|e| (e.visits, e.stats().q()))))
    }

    fn edge_or_insert(&mut self, node: NodeRef, action: Action) -> usize {
        if let Some(i) = self.nodes[node.0].edges[action.index()] {
            return i;
        }
        let i = self.edges.len();
        self.edges.push(TreeEdge {
            owner: node,
            action,
            visits: 0,
            value_sum: 0.0,
            failure_count: 0,
            outcomes: Vec::with_capacity(3),
        });
        self.nodes[node.0].edges[action.index()] = Some(i);
        i
    }

    /// Returns the child for `next` under the edge, creating it if needed.
    fn child_or_insert(&mut self, map: &GridMap, edge: usize, next: StateId) -> (NodeRef, bool) {
        let slot = match self.edges[edge].outcomes.iter().position(|o| o.state == next) {
            Some(i) => i,
            None => {
                self.edges[edge].outcomes.push(OutcomeSlot { state: next, count: 0, child: None });
                self.edges[edge].outcomes.len() - 1
            }
        };
        if let Some(c) = self.edges[edge].outcomes[slot].child {
            return (c, false);
        }
        let owner = self.edges[edge].owner;
        let action = self.edges[edge].action;
        let r = NodeRef(self.nodes.len());
        self.nodes.push(TreeNode {
            node_id: NodeId(self.next_id),
            state: next,
            parent: Some((owner, action)),
            visits: 0,
            terminal_kind: map.cell(next).ok().and_then(TerminalKind::of_cell),
            depth: self.nodes[owner.0].depth + 1,
            edges: [None; 4],
        });
        self.next_id += 1;
        self.edges[edge].outcomes[slot].child = Some(r);
        (r, true)
    }

    /// Adds one simulation's statistics along `path`.
    ///
    /// Walking back from the leaf, the return is `reward + gamma * downstream`.
    /// Every node on the path gains a visit; every edge gains a visit, the
    /// return, one count for its sampled outcome, and a failure when the
    /// simulation ended in a hole.
    pub fn backpropagate(&mut self, path: &SimulationPath, leaf_value: f64, gamma: f64) -> Result<(), PlanError> {
        match path.steps.first() {
            Some(first) if first.node == self.root => {}
            _ => return Err(PlanError::PathDetached),
        }
        let failed = path.end == EndKind::Hole;
        self.nodes[path.leaf.0].visits += 1;
        let mut ret = leaf_value;
        for step in path.steps.iter().rev() {
            ret = step.reward + gamma * ret;
            let ei = self.nodes[step.node.0].edges[step.action.index()].ok_or(PlanError::PathDetached)?;
            let edge = &mut self.edges[ei];
            edge.visits += 1;
            edge.value_sum += ret;
            if failed {
                edge.failure_count += 1;
            }
            match edge.outcomes.iter_mut().find(|o| o.state == step.next_state) {
                Some(o) => o.count += 1,
                None => edge.outcomes.push(OutcomeSlot { state: step.next_state, count: 1, child: None }),
            }
            self.nodes[step.node.0].visits += 1;
        }
        Ok(())
    }

    /// Selection and expansion phases of one simulation; returns the path and
    /// the leaf estimate.
    fn descend<R: Rng + ?Sized>(
        &mut self,
        map: &GridMap,
        params: &SearchParams,
        forced_first: Option<Action>,
        rng: &mut R,
    ) -> (SimulationPath, f64) {
        let mut node = self.root;
        let mut steps = Vec::new();
        loop {
            if let Some(kind) = self.nodes[node.0].terminal_kind {
                return (SimulationPath { steps, leaf: node, end: kind.into() }, 0.0);
            }
            let action = match forced_first {
                Some(a) if steps.is_empty() => a,
                _ => select_ucb(self.nodes[node.0].visits, &self.edge_stats(node), params.exploration_c),
            };
            let state = self.nodes[node.0].state;
            let outcome = map
                .sample_transition(state, action, rng)
                .expect("descent only acts in non-terminal nodes");
            let edge = self.edge_or_insert(node, action);
            let (child, created) = self.child_or_insert(map, edge, outcome.next_state);
            steps.push(PathStep { node, action, next_state: outcome.next_state, reward: outcome.reward });
            node = child;
            if created {
                if let Some(kind) = self.nodes[node.0].terminal_kind {
                    return (SimulationPath { steps, leaf: node, end: kind.into() }, 0.0);
                }
                let r = rollout_detailed(map, outcome.next_state, params, rng);
                return (SimulationPath { steps, leaf: node, end: r.end }, r.value);
            }
        }
    }

    /// Converts to the flat, canonical recorded form.
    pub fn to_recorded(&self, metadata: TraceMetadata) -> RecordedTree {
        let nodes = self
            .nodes
            .iter()
            .map(|n| DecisionNode {
                node_id: n.node_id,
                state: n.state,
                parent_node: n.parent.map(|(p, _)| self.nodes[p.0].node_id),
                parent_action: n.parent.map(|(_, a)| a),
                visits: n.visits,
                terminal_kind: n.terminal_kind,
                depth: n.depth,
            })
            .collect();
        let edges = self
            .edges
            .iter()
            .map(|e| ActionEdge {
                owner: self.nodes[e.owner.0].node_id,
                action: e.action,
                visits: e.visits,
                value_sum: e.value_sum,
                outcome_counts: e.outcomes.iter().map(|o| (o.state, o.count)).collect(),
                failure_count: e.failure_count,
                children: e
                    .outcomes
                    .iter()
                    .filter_map(|o| o.child.map(|c| (o.state, self.nodes[c.0].node_id)))
                    .collect(),
            })
            .collect();
        let mut tree = RecordedTree { format_version: FORMAT_VERSION, metadata, nodes, edges };
        tree.canonicalize();
        tree
    }
}

/// Resumable UCT search.
#[derive(Debug, Clone)]
pub struct Planner {
    map: GridMap,
    params: SearchParams,
    tree: SearchTree,
    rng: ChaCha8Rng,
    forced_first: Option<Action>,
    simulations: u64,
}

impl Planner {
    pub fn new(map: &GridMap, root_state: StateId, params: SearchParams) -> Result<Self, PlanError> {
        params.validate()?;
        Ok(Planner {
            map: map.clone(),
            params,
            tree: SearchTree::new(map, root_state)?,
            rng: ChaCha8Rng::seed_from_u64(params.seed),
            forced_first: None,
            simulations: 0,
        })
    }

    /// Continues an existing tree from `tree`'s current root, with a fresh
    /// random stream seeded by `seed` and, optionally, a forced first action.
    pub(crate) fn resume_from(
        map: &GridMap,
        tree: SearchTree,
        params: SearchParams,
        seed: u64,
        forced_first: Option<Action>,
    ) -> Self {
        Planner {
            map: map.clone(),
            params,
            tree,
            rng: ChaCha8Rng::seed_from_u64(seed),
            forced_first,
            simulations: 0,
        }
    }

    pub fn simulations(&self) -> u64 {
        self.simulations
    }

    pub fn tree(&self) -> &SearchTree {
        &self.tree
    }

    pub fn params(&self) -> &SearchParams {
        &self.params
    }

    pub(crate) fn into_tree(self) -> SearchTree {
        self.tree
    }

    /// Runs one full simulation and returns its path.
    pub fn simulate_once(&mut self) -> SimulationPath {
        let (path, value) = self.tree.descend(&self.map, &self.params, self.forced_first, &mut self.rng);
        self.tree
            .backpropagate(&path, value, self.params.gamma)
            .expect("descent paths start at the root");
        self.simulations += 1;
        path
    }

    /// Runs `n` more simulations. Can be called repeatedly.
    pub fn run(&mut self, n: u64) {
        for _ in 0..n {
            self.simulate_once();
        }
    }

    pub fn chosen_action(&self) -> Action {
        self.tree.best_action(self.tree.root())
    }

    /// Snapshot of the search so far as a recorded trace.
    pub fn record(&self, decision_step: u64) -> RecordedTree {
        let params = SearchParams { iteration_budget: self.simulations, ..self.params };
        let metadata = TraceMetadata {
            env: ENV_NAME.to_string(),
            map: self.map.to_string(),
            decision_step,
            params,
            chosen_action: self.chosen_action(),
            created_at: UNSET_TIMESTAMP.to_string(),
            expansions: Vec::new(),
        };
        self.tree.to_recorded(metadata)
    }
}

/// Runs `params.iteration_budget` simulations from `root_state`.
pub fn plan(map: &GridMap, root_state: StateId, params: &SearchParams) -> Result<(Action, RecordedTree), PlanError> {
    plan_step(map, root_state, params, 0)
}

/// [`plan`] for a given decision step of an episode.
pub fn plan_step(
    map: &GridMap,
    root_state: StateId,
    params: &SearchParams,
    decision_step: u64,
) -> Result<(Action, RecordedTree), PlanError> {
    let mut planner = Planner::new(map, root_state, *params)?;
    planner.run(params.iteration_budget);
    let tree = planner.record(decision_step);
    Ok((tree.metadata.chosen_action, tree))
}

/// Re-runs the original planning call recorded in a trace, ignoring any
/// expansions applied afterwards.
pub fn replay_original(tree: &RecordedTree) -> Result<RecordedTree, PlanError> {
    let map = tree.map()?;
    let root = tree.root_state().ok_or(PlanError::PathDetached)?;
    let (_, mut replayed) = plan_step(&map, root, &tree.metadata.params, tree.metadata.decision_step)?;
    replayed.metadata.created_at = tree.metadata.created_at.clone();
    Ok(replayed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::validate_trace;

    fn stats(v: [(u64, f64); 4]) -> [EdgeStats; 4] {
        v.map(|(n, q)| EdgeStats { visits: n, value_sum: q * n as f64 })
    }

    #[test]
    fn untried_action_goes_first() {
        let e = stats([(5, 0.9), (3, 0.1), (0, 0.0), (7, 0.5)]);
        assert_eq!(select_ucb(15, &e, 1.414), Action::Right);
    }

    #[test]
    fn equal_bonuses_pick_highest_q() {
        let e = stats([(10, 0.5), (10, 0.2), (10, 0.2), (10, 0.2)]);
        assert_eq!(select_ucb(40, &e, 1.414), Action::Left);
        let e = stats([(10, 0.2), (10, 0.2), (10, 0.2), (10, 0.5)]);
        assert_eq!(select_ucb(40, &e, 1.414), Action::Up);
    }

    #[test]
    fn full_ties_pick_lowest_index() {
        let e = stats([(10, 0.3); 4]);
        assert_eq!(select_ucb(40, &e, 1.414), Action::Left);
    }

    #[test]
    fn exploration_bonus_can_dominate() {
        // Q gap 0.1; bonus for the rarely tried arm is far larger.
        let e = stats([(1000, 0.6), (2, 0.5), (1000, 0.6), (1000, 0.6)]);
        assert_eq!(select_ucb(3002, &e, 1.414), Action::Down);
        assert_eq!(select_ucb(3002, &e, 0.0), Action::Left);
    }

    #[test]
    fn rollout_from_terminal_or_zero_cap_is_zero() {
        let map = GridMap::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = SearchParams::default();
        assert_eq!(rollout(&map, StateId(15), &p, &mut rng), 0.0);
        assert_eq!(rollout(&map, StateId(5), &p, &mut rng), 0.0);
        let p0 = SearchParams { rollout_depth_cap: 0, ..p };
        assert_eq!(rollout_detailed(&map, StateId(14), &p0, &mut rng).end, EndKind::Leaf);
    }

    #[test]
    fn terminal_root_is_rejected() {
        let map = GridMap::default();
        assert_eq!(
            plan(&map, StateId(15), &SearchParams::default()).unwrap_err(),
            PlanError::TerminalRoot(StateId(15))
        );
    }

    #[test]
    fn zero_budget_is_rejected() {
        let map = GridMap::default();
        let p = SearchParams { iteration_budget: 0, ..Default::default() };
        assert!(matches!(plan(&map, StateId(0), &p), Err(PlanError::InvalidParams(_))));
    }

    #[test]
    fn single_simulation_tree() {
        let map = GridMap::default();
        let p = SearchParams { iteration_budget: 1, seed: 7, ..Default::default() };
        let (chosen, tree) = plan(&map, StateId(0), &p).unwrap();
        let root = tree.root().unwrap();
        assert_eq!(root.visits, 1);
        assert_eq!(tree.edges.len(), 1);
        let e = &tree.edges[0];
        assert_eq!((e.owner, e.action, e.visits), (root.node_id, Action::Left, 1));
        assert_eq!(tree.nodes.len(), 2);
        assert_eq!(chosen, Action::Left);
        assert!(validate_trace(&tree).is_empty());
    }

    fn manual_step(tree: &mut SearchTree, map: &GridMap, node: NodeRef, action: Action, next: u32) -> (PathStep, NodeRef) {
        let e = tree.edge_or_insert(node, action);
        let (child, _) = tree.child_or_insert(map, e, StateId(next));
        let reward = if map.cell(StateId(next)).unwrap() == crate::env::CellKind::Goal { 1.0 } else { 0.0 };
        (PathStep { node, action, next_state: StateId(next), reward }, child)
    }

    #[test]
    fn one_step_goal_backup() {
        let map = GridMap::default();
        let mut tree = SearchTree::new(&map, StateId(14)).unwrap();
        let root = tree.root();
        let (step, leaf) = manual_step(&mut tree, &map, root, Action::Right, 15);
        let path = SimulationPath { steps: vec![step], leaf, end: EndKind::Goal };
        tree.backpropagate(&path, 0.0, 0.99).unwrap();
        let e = tree.edge(root, Action::Right).unwrap();
        assert_eq!((e.visits, e.value_sum, e.failure_count), (1, 1.0, 0));
        assert_eq!(e.outcomes[0].count, 1);
        assert_eq!(tree.node(root).visits, 1);
        assert_eq!(tree.node(leaf).visits, 1);
    }

    #[test]
    fn hole_ending_marks_every_edge() {
        let map = GridMap::default();
        let mut tree = SearchTree::new(&map, StateId(0)).unwrap();
        let root = tree.root();
        let (s1, n1) = manual_step(&mut tree, &map, root, Action::Right, 1);
        let (s2, leaf) = manual_step(&mut tree, &map, n1, Action::Down, 5);
        let path = SimulationPath { steps: vec![s1, s2], leaf, end: EndKind::Hole };
        tree.backpropagate(&path, 0.0, 0.99).unwrap();
        for (node, a) in [(root, Action::Right), (n1, Action::Down)] {
            let e = tree.edge(node, a).unwrap();
            assert_eq!((e.failure_count, e.value_sum), (1, 0.0));
        }
    }

    #[test]
    fn two_step_discounted_backup() {
        let map = GridMap::default();
        let mut tree = SearchTree::new(&map, StateId(10)).unwrap();
        let root = tree.root();
        let (s1, n1) = manual_step(&mut tree, &map, root, Action::Down, 14);
        let (s2, leaf) = manual_step(&mut tree, &map, n1, Action::Right, 15);
        let path = SimulationPath { steps: vec![s1, s2], leaf, end: EndKind::Goal };
        tree.backpropagate(&path, 0.0, 0.5).unwrap();
        assert_eq!(tree.edge(n1, Action::Right).unwrap().value_sum, 1.0);
        assert_eq!(tree.edge(root, Action::Down).unwrap().value_sum, 0.5);
    }

    #[test]
    fn detached_path_is_rejected() {
        let map = GridMap::default();
        let mut tree = SearchTree::new(&map, StateId(0)).unwrap();
        let root = tree.root();
        let (_, n1) = manual_step(&mut tree, &map, root, Action::Right, 1);
        let (s2, leaf) = manual_step(&mut tree, &map, n1, Action::Right, 2);
        let path = SimulationPath { steps: vec![s2], leaf, end: EndKind::Leaf };
        assert_eq!(tree.backpropagate(&path, 0.0, 0.9), Err(PlanError::PathDetached));
        let empty = SimulationPath { steps: vec![], leaf: root, end: EndKind::Leaf };
        assert_eq!(tree.backpropagate(&empty, 0.0, 0.9), Err(PlanError::PathDetached));
    }

    #[test]
    fn best_action_rules() {
        let f = |v: [(u64, f64); 4]| best_by_visits(v.map(Some));
        assert_eq!(f([(100, 0.0), (50, 0.0), (30, 0.0), (20, 0.0)]), Action::Left);
        assert_eq!(f([(50, 0.1), (50, 0.4), (10, 0.9), (10, 0.9)]), Action::Down);
        assert_eq!(best_by_visits([None; 4]), Action::Left);
        assert_eq!(f([(0, 0.0); 4]), Action::Left);
    }

    #[test]
    fn replay_reproduces_plan() {
        let map = GridMap::default();
        let p = SearchParams { iteration_budget: 300, seed: 99, ..Default::default() };
        let (_, tree) = plan_step(&map, StateId(4), &p, 3).unwrap();
        assert_eq!(replay_original(&tree).unwrap(), tree);
    }
}
