//! Builds the annotated query set from freshly planned traces.
//!
//! Six traces follow one route through the default map (decision steps 0 to
//! 5), plus one short "interrupted" search whose root barely tried Left. Each
//! trace is re-planned with successive seeds until it supports the questions
//! written for it. Annotations are computed here from raw edge counts, not by
//! the answerability detector, so the detector can be checked against them.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::answerability::EvidenceThresholds;
use crate::env::{Action, GridMap, StateId};
use crate::eval::{AnnotatedTarget, Level, QuerySample, QuerySet};
use crate::intent::{PathEntry, QuestionType, StateRef, StructuredIntent};
use crate::mcts::{plan_step, PlanError, SearchParams};
use crate::trace::{trace_file_name, DecisionNode, NodeId, NodeScope, RecordedTree};

/// States visited by the scripted route: Down, Down, Right, Down, Right.
pub const ROUTE: [u32; 6] = [0, 4, 8, 9, 13, 14];

pub const UP_QUESTION: &str = "Why did the agent choose Up at the current state?";
pub const LEFT_QUESTION: &str =
    "What would the agent's strategy look like if the Left action had been explored at the current state?";
pub const PATH_QUESTION: &str = "Why does going Right then Down from state 13 lead most reliably toward the goal?";

const MAX_ATTEMPTS: u64 = 400;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryGenOptions {
    pub seed: u64,
    /// Planning budget per decision step. Smaller searches leave the partly
    /// explored nodes that non-answerable questions need.
    pub episode_budgets: [u64; 6],
    pub interrupted_budget: u64,
    pub thresholds: EvidenceThresholds,
}

impl Default for QueryGenOptions {
    fn default() -> Self {
        QueryGenOptions {
            seed: 7,
            episode_budgets: [400, 800, 3000, 500, 800, 800],
            interrupted_budget: 40,
            thresholds: EvidenceThresholds::default() }
    }
}

#[derive(Debug, Error)]
pub enum QueryGenError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("no seed within {attempts} attempts produced a usable trace for {what}")]
    NoUsableTrace { what: String, attempts: u64 },
}

/// Edge-count view of one node used for annotation.
struct NodeView<'t> {
    tree: &'t RecordedTree,
    node: &'t DecisionNode,
}

impl<'t> NodeView<'t> {
    fn at(tree: &'t RecordedTree, state: StateId) -> Option<Self> {
        let id = tree.find_node(state, NodeScope::RootFirst)?;
        let node = tree.nodes.iter().find(|n| n.node_id == id)?;
        (node.terminal_kind.is_none()).then_some(NodeView { tree, node })
    }

    fn child(tree: &'t RecordedTree, id: NodeId) -> Option<Self> {
        let node = tree.nodes.iter().find(|n| n.node_id == id)?;
        (node.terminal_kind.is_none()).then_some(NodeView { tree, node })
    }

    fn visits(&self, a: Action) -> u64 {
        self.tree
            .edges
            .iter()
            .find(|e| e.owner == self.node.node_id && e.action == a)
            .map_or(0, |e| e.visits)
    }

    fn weak(&self, min: u64) -> Vec<Action> {
        Action::ALL.into_iter().filter(|&a| self.visits(a) < min).collect()
    }

    /// Action with the most visits, lowest index on ties.
    fn favourite(&self) -> Action {
        Action::ALL.into_iter().rev().max_by_key(|&a| self.visits(a)).unwrap_or(Action::Left)
    }

    /// Most frequent observed outcome of `a` and its child node.
    fn follow(&self, a: Action) -> Option<(StateId, NodeView<'t>)> {
        let edge = self.tree.edges.iter().find(|e| e.owner == self.node.node_id && e.action == a)?;
        let (state, _) = edge
            .outcome_counts
            .iter()
            .fold(None::<(StateId, u64)>, |best, (&s, &c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((s, c)),
            })?;
        let child = NodeView::child(self.tree, *edge.children.get(&state)?)?;
        Some((state, child))
    }
}

struct Draft {
    question: String,
    intent: StructuredIntent,
    target: Option<AnnotatedTarget>,
}

fn intent(t: QuestionType, state: Option<StateRef>, action: Option<Action>, path: Option<Vec<PathEntry>>, q: &str) -> StructuredIntent {
    StructuredIntent {
        question_type: t,
        target_state: state,
        target_action: action.map(|a| a.name().to_string()),
        target_path: path,
        raw_question: q.to_string(),
    }
}

fn node_draft(t: QuestionType, state: Option<StateRef>, action: Action, question: String, target: Option<AnnotatedTarget>) -> Draft {
    Draft { intent: intent(t, state, Some(action), None, &question), question, target }
}

fn path_draft(entries: Vec<(Option<StateRef>, Action)>, question: String, target: Option<AnnotatedTarget>) -> Draft {
    let path = entries.into_iter().map(|(state, a)| PathEntry { state, action: a.name().to_string() }).collect();
    Draft { intent: intent(QuestionType::PathWhy, None, None, Some(path), &question), question, target }
}

fn general_draft(question: &str) -> Draft {
    Draft { intent: intent(QuestionType::General, None, None, None, question), question: question.to_string(), target: None }
}

fn other_states(tree: &RecordedTree) -> Vec<StateId> {
    let root = tree.root_state();
    tree.states().into_iter().filter(|s| Some(*s) != root).collect()
}

/// A non-root state whose node has exactly one weak edge.
fn one_weak(tree: &RecordedTree, min: u64) -> Option<(StateId, Action, NodeView<'_>)> {
    other_states(tree).into_iter().find_map(|s| {
        let v = NodeView::at(tree, s)?;
        match v.weak(min).as_slice() {
            [a] => Some((s, *a, v)),
            _ => None,
        }
    })
}

fn all_strong(tree: &RecordedTree, min: u64) -> Option<(StateId, NodeView<'_>)> {
    other_states(tree).into_iter().find_map(|s| {
        let v = NodeView::at(tree, s)?;
        v.weak(min).is_empty().then_some((s, v))
    })
}

fn root_view(tree: &RecordedTree) -> Option<NodeView<'_>> {
    NodeView::at(tree, tree.root_state()?)
}

/// An action other than `chosen`, preferring the least visited.
fn alternative(v: &NodeView<'_>, chosen: Action) -> Action {
    Action::ALL
        .into_iter()
        .filter(|&a| a != chosen)
        .min_by_key(|&a| (v.visits(a), a.index()))
        .expect("three alternatives")
}

fn na(state: StateId, action: Action) -> Option<AnnotatedTarget> {
    Some(AnnotatedTarget { state, action })
}

/// Questions for one decision step, or `None` if the trace cannot support them.
fn drafts_for_step(step: usize, tree: &RecordedTree, min: u64) -> Option<Vec<Draft>> {
    let root = root_view(tree)?;
    let root_strong = root.weak(min).is_empty();
    let chosen = tree.metadata.chosen_action;
    let rs = tree.root_state()?.0;
    let mut out = Vec::new();
    match step {
        0 => {
            if !root_strong {
                return None;
            }
            out.push(node_draft(
                QuestionType::WhyAction,
                Some(StateRef::Current),
                chosen,
                format!("Why did the agent choose {} at the current state?", chosen.name()),
                None,
            ));
            let (s, weak, _) = one_weak(tree, min)?;
            out.push(node_draft(
                QuestionType::WhyNotAction,
                Some(StateRef::Id(s)),
                weak,
                format!("Why wouldn't the agent go {} at state {}?", weak.name(), s.0),
                na(s, weak),
            ));
            let (_, child) = root.follow(chosen)?;
            let second = child.favourite();
            if child.visits(second) < min {
                return None;
            }
            out.push(path_draft(
                vec![(Some(StateRef::Current), chosen), (None, second)],
                format!("Why does going {} then {} from the current state work well?", chosen.name(), second.name()),
                None,
            ));
            out.push(general_draft("How confident is the agent in its plan at this step?"));
        }
        1 => {
            if !root_strong {
                return None;
            }
            let alt = alternative(&root, chosen);
            out.push(node_draft(
                QuestionType::WhyNotAction,
                Some(StateRef::Current),
                alt,
                format!("Why didn't the agent choose {} at the current state?", alt.name()),
                None,
            ));
            let (s, v) = all_strong(tree, min)?;
            let fav = v.favourite();
            out.push(node_draft(
                QuestionType::WhyAction,
                Some(StateRef::Id(s)),
                fav,
                format!("Why would the agent choose {} at state {}?", fav.name(), s.0),
                None,
            ));
            let alt_s = alternative(&v, fav);
            out.push(node_draft(
                QuestionType::WhatIf,
                Some(StateRef::Id(s)),
                alt_s,
                format!("What if the agent went {} at state {} instead?", alt_s.name(), s.0),
                None,
            ));
        }
        2 => {
            if !root_strong || chosen != Action::Up {
                return None;
            }
            out.push(node_draft(QuestionType::WhyAction, Some(StateRef::Current), Action::Up, UP_QUESTION.to_string(), None));
            let alt = alternative(&root, chosen);
            out.push(node_draft(
                QuestionType::WhatIf,
                Some(StateRef::Current),
                alt,
                format!("What if the agent had moved {} at the current state?", alt.name()),
                None,
            ));
            let (_, c1) = root.follow(chosen)?;
            let a2 = c1.favourite();
            let (_, c2) = c1.follow(a2)?;
            let a3 = c2.favourite();
            if c1.visits(a2) < min || c2.visits(a3) < min {
                return None;
            }
            out.push(path_draft(
                vec![(Some(StateRef::Id(StateId(rs))), chosen), (None, a2), (None, a3)],
                format!("Why is the route {}, {}, {} from state {} a good one?", chosen.name(), a2.name(), a3.name(), rs),
                None,
            ));
        }
        3 => {
            if !root_strong {
                return None;
            }
            let (s, weak, v) = one_weak(tree, min)?;
            let fav = v.favourite();
            out.push(node_draft(
                QuestionType::WhyAction,
                Some(StateRef::Id(s)),
                fav,
                format!("Why does the agent favour {} at state {}?", fav.name(), s.0),
                na(s, weak),
            ));
            let alt = alternative(&root, chosen);
            out.push(node_draft(
                QuestionType::WhyNotAction,
                Some(StateRef::Current),
                alt,
                format!("Why not {} at the current state?", alt.name()),
                None,
            ));
            out.push(general_draft("Summarize what the search explored before this decision."));
            // Strong first hop whose usual outcome left one action barely tried.
            let (first, child_state, weak) = Action::ALL.into_iter().find_map(|a| {
                if root.visits(a) < min {
                    return None;
                }
                let (cs, child) = root.follow(a)?;
                // Keep the hop node the one a bare state reference resolves to.
                if tree.find_node(cs, NodeScope::RootFirst) != Some(child.node.node_id) {
                    return None;
                }
                let weak = child.weak(min);
                weak.first().map(|w| (a, cs, *w))
            })?;
            out.push(path_draft(
                vec![(Some(StateRef::Id(StateId(rs))), first), (None, weak)],
                format!("Why is it safe to go {} and then {} from state {}?", first.name(), weak.name(), rs),
                na(child_state, weak),
            ));
        }
        4 => {
            if !root_strong {
                return None;
            }
            out.push(node_draft(
                QuestionType::WhyAction,
                Some(StateRef::Id(StateId(rs))),
                chosen,
                format!("Why does the agent prefer {} in state {}?", chosen.name(), rs),
                None,
            ));
            if rs != 13 || root.visits(Action::Right) < min {
                return None;
            }
            let (_, child) = root.follow(Action::Right)?;
            if child.visits(Action::Down) < min {
                return None;
            }
            out.push(path_draft(
                vec![(Some(StateRef::Id(StateId(13))), Action::Right), (None, Action::Down)],
                PATH_QUESTION.to_string(),
                None,
            ));
        }
        5 => {
            if !root_strong {
                return None;
            }
            let alt = alternative(&root, chosen);
            out.push(node_draft(
                QuestionType::WhyNotAction,
                Some(StateRef::Id(StateId(rs))),
                alt,
                format!("Why did the agent not move {} from state {}?", alt.name(), rs),
                None,
            ));
            let (s, weak) = other_states(tree).into_iter().find_map(|s| {
                let v = NodeView::at(tree, s)?;
                v.weak(min).first().map(|a| (s, *a))
            })?;
            out.push(node_draft(
                QuestionType::WhatIf,
                Some(StateRef::Id(s)),
                weak,
                format!("What would happen if the agent went {} from state {}?", weak.name(), s.0),
                na(s, weak),
            ));
            out.push(general_draft("How many simulations did the planner run for this decision?"));
        }
        _ => return None,
    }
    Some(out)
}

fn drafts_for_interrupted(tree: &RecordedTree, min: u64) -> Option<Vec<Draft>> {
    let root = root_view(tree)?;
    let rs = tree.root_state()?;
    if root.visits(Action::Left) >= min {
        return None;
    }
    Some(vec![
        node_draft(QuestionType::WhatIf, Some(StateRef::Current), Action::Left, LEFT_QUESTION.to_string(), na(rs, Action::Left)),
        general_draft("What does the search tree say overall about this decision?"),
    ])
}

fn search<F>(what: String, map: &GridMap, root: StateId, step: u64, params: SearchParams, accept: F) -> Result<(RecordedTree, Vec<Draft>), QueryGenError>
where
    F: Fn(&RecordedTree) -> Option<Vec<Draft>>,
{
    for attempt in 0..MAX_ATTEMPTS {
        let p = SearchParams { seed: params.seed.wrapping_add(attempt), ..params };
        let (_, tree) = plan_step(map, root, &p, step)?;
        if let Some(drafts) = accept(&tree) {
            return Ok((tree, drafts));
        }
    }
    Err(QueryGenError::NoUsableTrace { what, attempts: MAX_ATTEMPTS })
}

/// Plans the traces and writes 21 annotated samples over them.
pub fn build_query_set(map: &GridMap, opts: &QueryGenOptions) -> Result<QuerySet, QueryGenError> {
    let min = opts.thresholds.min_edge_visits;
    let mut traces = BTreeMap::new();
    let mut per_trace: Vec<(String, Vec<Draft>)> = Vec::new();

    for (step, &root) in ROUTE.iter().enumerate() {
        let params = SearchParams {
            iteration_budget: opts.episode_budgets[step],
            seed: opts.seed.wrapping_mul(1_000_003).wrapping_add(step as u64 * 10_000),
            ..SearchParams::default()
        };
        let (tree, drafts) = search(format!("decision step {step}"), map, StateId(root), step as u64, params, |t| {
            drafts_for_step(step, t, min)
        })?;
        let rel = format!("traces/episode/{}", trace_file_name(step as u64, 0));
        traces.insert(rel.clone(), tree);
        per_trace.push((rel, drafts));
    }

    let params = SearchParams {
        iteration_budget: opts.interrupted_budget,
        seed: opts.seed.wrapping_mul(1_000_003).wrapping_add(90_000),
        ..SearchParams::default()
    };
    let (tree, drafts) = search("interrupted search".into(), map, StateId(14), 0, params, |t| drafts_for_interrupted(t, min))?;
    let rel = format!("traces/interrupted/{}", trace_file_name(0, 0));
    traces.insert(rel.clone(), tree);
    per_trace.push((rel, drafts));

    // Ids run grouped by question type.
    let mut samples: Vec<QuerySample> = per_trace
        .into_iter()
        .flat_map(|(rel, drafts)| {
            drafts.into_iter().map(move |d| QuerySample {
                id: String::new(),
                level: match d.intent.question_type {
                    QuestionType::PathWhy => Level::Path,
                    QuestionType::General => Level::General,
                    _ => Level::Node,
                },
                question: d.question,
                trace_file: rel.clone(),
                answerable: d.target.is_none(),
                expansion_target: d.target,
                ground_truth_intent: d.intent,
            })
        })
        .collect();
    samples.sort_by_key(|s| s.ground_truth_intent.question_type);
    for (i, s) in samples.iter_mut().enumerate() {
        s.id = format!("q{:02}", i + 1);
    }
    Ok(QuerySet { samples, traces })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_covers_types_and_paper_questions() {
        let set = build_query_set(&GridMap::default(), &QueryGenOptions::default()).unwrap();
        assert_eq!(set.samples.len(), 21);
        for t in QuestionType::ALL {
            assert!(set.samples.iter().filter(|s| s.ground_truth_intent.question_type == t).count() >= 2, "{t}");
        }
        for q in [UP_QUESTION, LEFT_QUESTION, PATH_QUESTION] {
            assert!(set.samples.iter().any(|s| s.question == q), "{q}");
        }
        let non = set.samples.iter().filter(|s| !s.answerable).count();
        assert!(non >= 3, "{non}");
        let qs: std::collections::BTreeSet<_> = set.samples.iter().map(|s| &s.question).collect();
        assert_eq!(qs.len(), 21);
    }
}
