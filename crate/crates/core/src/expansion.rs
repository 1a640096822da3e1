//! Targeted expansion: grow a recorded tree from one node.
//!
//! Extra simulations start at the target node, which acts as a local root
//! (its visit count is the UCB numerator). With a forced action, every added
//! simulation leaves the target through that action first. Statistics of the
//! target's ancestors are not touched; each expansion is logged in the trace
//! metadata instead, so the numbers the original decision was based on can
//! still be reproduced from the recorded seed.

use thiserror::Error;

use crate::env::{Action, GridMap};
use crate::mcts::{Planner, SearchTree};
use crate::trace::{ExpansionRecord, NodeId, RecordedTree};

pub const DEFAULT_EXPANSION_BUDGET: u64 = 500;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExpansionError {
    #[error("expansion target {0} is not in the tree")]
    TargetMissing(NodeId),
    #[error("expansion target {0} is terminal")]
    TargetTerminal(NodeId),
    #[error("expansion budget must be at least 1")]
    ZeroBudget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionRequest {
    pub target_node: NodeId,
    pub forced_action: Option<Action>,
    pub budget: u64,
    pub seed: u64,
    pub created_at: String,
}

/// Seed for the next expansion of `tree`, derived from its planning seed and
/// the number of expansions already applied.
pub fn next_expansion_seed(tree: &RecordedTree, target: NodeId, action: Option<Action>) -> u64 {
    let round = tree.metadata.expansions.len() as u64 + 1;
    let action_tag = action.map(|a| a.index() as u64 + 1).unwrap_or(0);
    tree.metadata
        .params
        .seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(round.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(target.0.wrapping_mul(31).wrapping_add(action_tag))
}

/// Runs `request.budget` extra simulations from the target node and returns
/// the merged tree. Existing node ids are preserved; new nodes get larger ids.
pub fn expand_targeted(
    tree: &RecordedTree,
    map: &GridMap,
    request: &ExpansionRequest,
) -> Result<RecordedTree, ExpansionError> {
    if request.budget == 0 {
        return Err(ExpansionError::ZeroBudget);
    }
    let target = tree
        .index()
        .node(request.target_node)
        .ok_or(ExpansionError::TargetMissing(request.target_node))?;
    if target.terminal_kind.is_some() || map.is_terminal(target.state) {
        return Err(ExpansionError::TargetTerminal(request.target_node));
    }
    let arena = SearchTree::from_recorded(tree, request.target_node)
        .ok_or(ExpansionError::TargetMissing(request.target_node))?;
    let mut planner = Planner::resume_from(
        map,
        arena,
        tree.metadata.params,
        request.seed,
        request.forced_action,
    );
    planner.run(request.budget);

    let mut metadata = tree.metadata.clone();
    metadata.expansions.push(ExpansionRecord {
        target_node: request.target_node,
        forced_action: request.forced_action,
        budget: request.budget,
        seed: request.seed,
        created_at: request.created_at.clone(),
    });
    Ok(planner.into_tree().to_recorded(metadata))
}
