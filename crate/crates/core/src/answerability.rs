//! Rule-based check that a tree holds enough evidence for a question.

use serde::{Deserialize, Serialize};

use crate::env::{Action, StateId};
use crate::intent::{QuestionType, ResolvedIntent};
use crate::trace::{NodeId, RecordedTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvidenceThresholds {
    pub min_node_visits: u64,
    pub min_edge_visits: u64,
}

impl Default for EvidenceThresholds {
    fn default() -> Self {
        EvidenceThresholds { min_node_visits: 1, min_edge_visits: 10 }
    }
}

impl EvidenceThresholds {
    pub fn validate(&self) -> Result<(), String> {
        if self.min_edge_visits == 0 {
            return Err("thresholds.min_edge_visits must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReasonCode {
    NodeMissing,
    EdgeMissing,
    EdgeUnderexplored,
    PathBroken,
    #[serde(rename = "OK")]
    Ok,
}

/// Where targeted expansion should start. `node_id` is absent when the state
/// has no node in the tree, which makes the target unexpandable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionTarget {
    pub state: StateId,
    pub action: Option<Action>,
    pub node_id: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerabilityVerdict {
    pub answerable: bool,
    pub reasons: Vec<ReasonCode>,
    pub expansion_targets: Vec<ExpansionTarget>,
}

impl AnswerabilityVerdict {
    fn ok() -> Self {
        AnswerabilityVerdict { answerable: true, reasons: vec![ReasonCode::Ok], expansion_targets: Vec::new() }
    }

    fn missing(items: Vec<(ReasonCode, ExpansionTarget)>) -> Self {
        let (reasons, expansion_targets) = items.into_iter().unzip();
        AnswerabilityVerdict { answerable: false, reasons, expansion_targets }
    }

    /// The first target, which the annotation convention names.
    pub fn first_target(&self) -> Option<(StateId, Option<Action>)> {
        self.expansion_targets.first().map(|t| (t.state, t.action))
    }
}

/// Evaluates the evidence rules for `resolved` against `tree`.
///
/// * general: always answerable.
/// * why / why-not: the node exists and all four edges reach `min_edge_visits`;
///   every weak edge becomes a target, in action order.
/// * what-if: the asked edge reaches `min_edge_visits`.
/// * path: each hop's node and edge exist with enough visits and each hop is an
///   observed outcome of the previous one; only the first failure is reported.
pub fn detect(resolved: &ResolvedIntent, tree: &RecordedTree, thresholds: &EvidenceThresholds) -> AnswerabilityVerdict {
    let index = tree.index();
    let node_ok = |id: Option<NodeId>| {
        id.and_then(|n| index.node(n)).filter(|n| n.visits >= thresholds.min_node_visits && n.terminal_kind.is_none())
    };
    let edge_visits = |n: NodeId, a: Action| index.edge(n, a).map(|e| e.visits).unwrap_or(0);
    let node_missing = |state: Option<StateId>, action: Option<Action>| {
        AnswerabilityVerdict::missing(vec![(
            ReasonCode::NodeMissing,
            ExpansionTarget { state: state.unwrap_or(StateId(0)), action, node_id: None },
        )])
    };

    match resolved.intent.question_type {
        QuestionType::General => AnswerabilityVerdict::ok(),
        QuestionType::WhyAction | QuestionType::WhyNotAction => {
            let Some(node) = node_ok(resolved.node_id) else {
                return node_missing(resolved.state, resolved.action);
            };
            let edges = index.edges_of(node.node_id);
            let code = if edges.iter().all(Option::is_none) {
                ReasonCode::EdgeMissing
            } else {
                ReasonCode::EdgeUnderexplored
            };
            let weak: Vec<_> = Action::ALL
                .into_iter()
                .filter(|&a| edge_visits(node.node_id, a) < thresholds.min_edge_visits)
                .map(|a| (code, ExpansionTarget { state: node.state, action: Some(a), node_id: Some(node.node_id) }))
                .collect();
            if weak.is_empty() {
                AnswerabilityVerdict::ok()
            } else {
                AnswerabilityVerdict::missing(weak)
            }
        }
        QuestionType::WhatIf => {
            let Some(node) = node_ok(resolved.node_id) else {
                return node_missing(resolved.state, resolved.action);
            };
            let Some(action) = resolved.action else {
                return node_missing(resolved.state, None);
            };
            if edge_visits(node.node_id, action) >= thresholds.min_edge_visits {
                AnswerabilityVerdict::ok()
            } else {
                AnswerabilityVerdict::missing(vec![(
                    ReasonCode::EdgeUnderexplored,
                    ExpansionTarget { state: node.state, action: Some(action), node_id: Some(node.node_id) },
                )])
            }
        }
        QuestionType::PathWhy => {
            let Some(hops) = resolved.path.as_deref().filter(|h| !h.is_empty()) else {
                return node_missing(resolved.state, None);
            };
            for (i, hop) in hops.iter().enumerate() {
                let Some(node) = node_ok(hop.node_id) else {
                    if i == 0 {
                        return node_missing(hop.state, Some(hop.action));
                    }
                    // The previous hop is well explored but never led here.
                    let prev = &hops[i - 1];
                    return AnswerabilityVerdict::missing(vec![(
                        ReasonCode::PathBroken,
                        ExpansionTarget {
                            state: prev.state.unwrap_or(StateId(0)),
                            action: Some(prev.action),
                            node_id: prev.node_id,
                        },
                    )]);
                };
                if edge_visits(node.node_id, hop.action) < thresholds.min_edge_visits {
                    return AnswerabilityVerdict::missing(vec![(
                        ReasonCode::EdgeUnderexplored,
                        ExpansionTarget { state: node.state, action: Some(hop.action), node_id: Some(node.node_id) },
                    )]);
                }
            }
            AnswerabilityVerdict::ok()
        }
    }
}
