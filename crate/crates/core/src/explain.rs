//! Evidence selection, explanation prompts and the keyword grounding check.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, StateId};
use crate::intent::{QuestionType, ResolvedIntent, StructuredIntent};
use crate::llm::{ChatClient, ChatRequest, ResponseFormat, QUESTION_PREFIX};
use crate::trace::{risk, ActionEdge, NodeId, RecordedTree};

/// How many outcome states each action row lists.
const TOP_OUTCOMES: usize = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvidenceError {
    #[error("evidence unavailable: {0}")]
    EvidenceUnavailable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeEvidence {
    pub node_id: NodeId,
    pub state: StateId,
    pub visits: u64,
    pub depth: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCount {
    pub state: StateId,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRow {
    pub action: Action,
    pub visits: u64,
    pub q: Option<f64>,
    pub risk: Option<f64>,
    pub top_outcomes: Vec<OutcomeCount>,
    pub explored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRow {
    pub hop: usize,
    pub state: Option<StateId>,
    pub node_id: Option<NodeId>,
    pub action: Action,
    pub visits: u64,
    pub q: Option<f64>,
    pub risk: Option<f64>,
    pub next_state: Option<StateId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeStats {
    pub decision_step: u64,
    pub total_simulations: u64,
    pub node_count: usize,
    pub max_depth: u32,
    pub chosen_root_action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionEvidence {
    pub target_node: NodeId,
    pub target_state: StateId,
    pub forced_action: Option<Action>,
    pub budget: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceBundle {
    pub question_type: QuestionType,
    pub target: NodeEvidence,
    /// The recorded decision at the root, the current best action elsewhere.
    pub chosen_action: Action,
    pub user_actions: Vec<Action>,
    /// One row per legal action, most visited first.
    pub action_rows: Vec<ActionRow>,
    pub path_rows: Vec<PathRow>,
    pub path_risk: Option<f64>,
    pub tree_stats: TreeStats,
    pub expansions: Vec<ExpansionEvidence>,
    pub expansion_note: Option<String>,
}

/// Probability of at least one hole along independent edges: 1 - Π(1 - r).
pub fn compose_path_risk(risks: &[f64]) -> f64 {
    1.0 - risks.iter().map(|r| 1.0 - r).product::<f64>()
}

fn fmt_f(x: f64) -> String {
    format!("{x:.3}")
}

fn action_row(action: Action, edge: Option<&ActionEdge>) -> ActionRow {
    match edge.filter(|e| e.visits > 0) {
        None => ActionRow { action, visits: 0, q: None, risk: None, top_outcomes: Vec::new(), explored: false },
        Some(e) => {
            let mut outcomes: Vec<OutcomeCount> =
                e.outcome_counts.iter().map(|(s, c)| OutcomeCount { state: *s, count: *c }).collect();
            outcomes.sort_by(|a, b| b.count.cmp(&a.count).then(a.state.cmp(&b.state)));
            outcomes.truncate(TOP_OUTCOMES);
            ActionRow {
                action,
                visits: e.visits,
                q: Some(e.q()),
                risk: risk(e).map(|r| r.value),
                top_outcomes: outcomes,
                explored: true,
            }
        }
    }
}

/// Collects the statistics a question needs. Deterministic per (resolved, tree).
pub fn assemble_evidence(resolved: &ResolvedIntent, tree: &RecordedTree) -> Result<EvidenceBundle, EvidenceError> {
    let index = tree.index();
    let root = tree.root().ok_or_else(|| EvidenceError::EvidenceUnavailable("tree has no root".into()))?;
    let node_id = match resolved.intent.question_type {
        QuestionType::General => root.node_id,
        _ => resolved
            .node_id
            .ok_or_else(|| EvidenceError::EvidenceUnavailable("question target has no node".into()))?,
    };
    let node = index
        .node(node_id)
        .ok_or_else(|| EvidenceError::EvidenceUnavailable(format!("node {node_id} is not in the tree")))?;
    for (n, a) in &resolved.edge_refs {
        if index.edge(*n, *a).is_none() {
            return Err(EvidenceError::EvidenceUnavailable(format!("edge ({n}, {a}) is not in the tree")));
        }
    }

    let chosen_action = if node.node_id == root.node_id {
        tree.metadata.chosen_action
    } else {
        index.best_action(node.node_id)
    };
    let mut action_rows: Vec<ActionRow> = Action::ALL.into_iter().map(|a| action_row(a, index.edge(node.node_id, a))).collect();
    action_rows.sort_by(|a, b| b.visits.cmp(&a.visits).then(a.action.cmp(&b.action)));

    let mut path_rows = Vec::new();
    if let Some(hops) = &resolved.path {
        for (i, hop) in hops.iter().enumerate() {
            let edge = hop.node_id.and_then(|n| index.edge(n, hop.action));
            let next_state = match hops.get(i + 1) {
                Some(next) => next.state,
                None => edge.and_then(|e| e.most_visited_outcome()).map(|(s, _)| s),
            };
            path_rows.push(PathRow {
                hop: i,
                state: hop.state,
                node_id: hop.node_id,
                action: hop.action,
                visits: edge.map(|e| e.visits).unwrap_or(0),
                q: edge.filter(|e| e.visits > 0).map(|e| e.q()),
                risk: edge.and_then(risk).map(|r| r.value),
                next_state,
            });
        }
    }
    let path_risk = if path_rows.is_empty() {
        None
    } else {
        path_rows.iter().map(|r| r.risk).collect::<Option<Vec<f64>>>().map(|rs| compose_path_risk(&rs))
    };

    let expansions: Vec<ExpansionEvidence> = tree
        .metadata
        .expansions
        .iter()
        .filter_map(|x| {
            index.node(x.target_node).map(|n| ExpansionEvidence {
                target_node: x.target_node,
                target_state: n.state,
                forced_action: x.forced_action,
                budget: x.budget,
            })
        })
        .collect();
    let expansion_note = (!expansions.is_empty()).then(|| {
        let parts: Vec<String> = expansions
            .iter()
            .map(|x| match x.forced_action {
                Some(a) => format!("{} simulations from state {} starting with {}", x.budget, x.target_state.0, a.name()),
                None => format!("{} simulations from state {}", x.budget, x.target_state.0),
            })
            .collect();
        format!(
            "Some statistics come from extra search run after the decision to answer this question ({}). \
             The agent's decision used only the original statistics.",
            parts.join("; ")
        )
    });

    Ok(EvidenceBundle {
        question_type: resolved.intent.question_type,
        target: NodeEvidence { node_id: node.node_id, state: node.state, visits: node.visits, depth: node.depth },
        chosen_action,
        user_actions: resolved.intent.user_actions(),
        action_rows,
        path_rows,
        path_risk,
        tree_stats: TreeStats {
            decision_step: tree.metadata.decision_step,
            total_simulations: root.visits,
            node_count: tree.nodes.len(),
            max_depth: tree.max_depth(),
            chosen_root_action: tree.metadata.chosen_action,
        },
        expansions,
        expansion_note,
    })
}

impl EvidenceBundle {
    /// Every number [`render_evidence`] may print, in its printed form.
    pub fn numeric_tokens(&self) -> BTreeSet<String> {
        let mut t = BTreeSet::new();
        let mut int = |v: u64| {
            t.insert(v.to_string());
        };
        int(self.target.node_id.0);
        int(self.target.state.0 as u64);
        int(self.target.visits);
        int(self.target.depth as u64);
        int(self.tree_stats.decision_step);
        int(self.tree_stats.total_simulations);
        int(self.tree_stats.node_count as u64);
        int(self.tree_stats.max_depth as u64);
        for r in &self.action_rows {
            int(r.visits);
            for o in &r.top_outcomes {
                int(o.state.0 as u64);
                int(o.count);
            }
        }
        for r in &self.path_rows {
            int(r.hop as u64);
            int(r.visits);
            for s in [r.state, r.next_state].into_iter().flatten() {
                int(s.0 as u64);
            }
        }
        for x in &self.expansions {
            int(x.budget);
            int(x.target_state.0 as u64);
        }
        let floats = self
            .action_rows
            .iter()
            .flat_map(|r| [r.q, r.risk])
            .chain(self.path_rows.iter().flat_map(|r| [r.q, r.risk]))
            .chain([self.path_risk])
            .flatten();
        for f in floats {
            t.insert(fmt_f(f));
        }
        t
    }

    /// Risk values as they appear in prompts.
    pub fn risk_strings(&self) -> Vec<String> {
        self.action_rows
            .iter()
            .map(|r| r.risk)
            .chain(self.path_rows.iter().map(|r| r.risk))
            .chain([self.path_risk])
            .flatten()
            .map(fmt_f)
            .collect()
    }
}

fn opt_f(x: Option<f64>) -> String {
    x.map(fmt_f).unwrap_or_else(|| "-".to_string())
}

/// The evidence block of the explanation prompt. Numbers come only from the
/// bundle: integers verbatim, reals with three decimals.
pub fn render_evidence(e: &EvidenceBundle) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Question type: {}", e.question_type);
    let _ = writeln!(s, "Decision step: {}", e.tree_stats.decision_step);
    let _ = writeln!(
        s,
        "Target state: {} (node {}, visits {}, depth {})",
        e.target.state.0, e.target.node_id.0, e.target.visits, e.target.depth
    );
    let _ = writeln!(s, "Agent's chosen action: {}", e.chosen_action.name());
    let asked = if e.user_actions.is_empty() {
        "none".to_string()
    } else {
        e.user_actions.iter().map(|a| a.name()).collect::<Vec<_>>().join(", ")
    };
    let _ = writeln!(s, "User-referenced actions: {asked}");
    let _ = writeln!(s, "Actions at the target state:");
    let _ = writeln!(s, "action | visits | mean return | hole risk | most frequent next states");
    for r in &e.action_rows {
        let outcomes = if r.explored {
            r.top_outcomes.iter().map(|o| format!("{} x {}", o.state.0, o.count)).collect::<Vec<_>>().join(", ")
        } else {
            "unexplored".to_string()
        };
        let _ = writeln!(s, "{} | {} | {} | {} | {}", r.action.name(), r.visits, opt_f(r.q), opt_f(r.risk), outcomes);
    }
    if !e.path_rows.is_empty() {
        let _ = writeln!(s, "Path:");
        let _ = writeln!(s, "hop | state | action | visits | mean return | hole risk | next state");
        for r in &e.path_rows {
            let st = |x: Option<StateId>| x.map(|v| v.0.to_string()).unwrap_or_else(|| "unknown".to_string());
            let _ = writeln!(
                s,
                "{} | {} | {} | {} | {} | {} | {}",
                r.hop,
                st(r.state),
                r.action.name(),
                r.visits,
                opt_f(r.q),
                opt_f(r.risk),
                st(r.next_state)
            );
        }
        let _ = writeln!(s, "Composed hole risk along the path: {}", opt_f(e.path_risk));
    }
    let _ = writeln!(
        s,
        "Search: {} simulations, {} nodes, max depth {}, chosen root action {}",
        e.tree_stats.total_simulations,
        e.tree_stats.node_count,
        e.tree_stats.max_depth,
        e.tree_stats.chosen_root_action.name()
    );
    if let Some(note) = &e.expansion_note {
        let _ = writeln!(s, "Expansion note: {note}");
    }
    s
}

/// Numeric tokens (`12`, `0.250`) appearing in `text`.
pub fn numeric_tokens_in(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_ascii_digit() && (i == 0 || !chars[i - 1].is_alphanumeric()) {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            out.push(chars[start..i].iter().collect());
        } else {
            i += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub mention_agent_action: bool,
    pub mention_risk: bool,
    /// Absent when the question names no action.
    pub mention_user_action: Option<bool>,
    pub all_passed: bool,
}

fn words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphabetic()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

/// Case-insensitive keyword check of an answer against its evidence.
pub fn grounding_check(
    answer: &str,
    resolved: &ResolvedIntent,
    evidence: &EvidenceBundle,
    lexicon: &[String],
) -> GroundingResult {
    let lower = answer.to_lowercase();
    let ws = words(answer);
    let names = |a: Action| ws.contains(&a.name().to_lowercase());
    let mention_agent_action = names(evidence.chosen_action);
    let mention_risk = lexicon.iter().any(|term| lower.contains(&term.to_lowercase()))
        || evidence.risk_strings().iter().any(|r| answer.contains(r.as_str()));
    let user = resolved.intent.user_actions();
    let mention_user_action = (!user.is_empty()).then(|| user.iter().all(|&a| names(a)));
    GroundingResult {
        mention_agent_action,
        mention_risk,
        mention_user_action,
        all_passed: mention_agent_action && mention_risk && mention_user_action.unwrap_or(true),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmMetadata {
    pub model: String,
    pub prompt_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub answer_text: String,
    pub evidence: EvidenceBundle,
    pub intent: StructuredIntent,
    /// Absent when generation failed.
    pub grounding: Option<GroundingResult>,
    pub llm: LlmMetadata,
    pub error: Option<ReportError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainSettings<'a> {
    pub model: &'a str,
    pub prompt_id: &'a str,
    pub system_prompt: &'a str,
    pub temperature: f32,
    pub max_tokens: u32,
    pub lexicon: &'a [String],
}

/// The user message sent for explanation generation.
pub fn explanation_message(question: &str, evidence: &EvidenceBundle) -> String {
    format!("{QUESTION_PREFIX}{}\n\nEvidence:\n{}", question.trim(), render_evidence(evidence))
}

/// Generates and grounds an answer. Transport failures yield a report with an
/// error marker and the evidence intact.
pub fn generate_explanation(
    question: &str,
    resolved: &ResolvedIntent,
    evidence: &EvidenceBundle,
    client: &dyn ChatClient,
    settings: &ExplainSettings<'_>,
) -> ExplanationReport {
    let request = ChatRequest {
        model: settings.model.to_string(),
        system_prompt: settings.system_prompt.to_string(),
        user_message: explanation_message(question, evidence),
        temperature: settings.temperature,
        max_tokens: settings.max_tokens,
        response_format: ResponseFormat::FreeText,
    };
    let llm = LlmMetadata { model: client.model().to_string(), prompt_id: settings.prompt_id.to_string() };
    match client.complete(&request) {
        Ok(resp) if !resp.text.trim().is_empty() => ExplanationReport {
            grounding: Some(grounding_check(&resp.text, resolved, evidence, settings.lexicon)),
            answer_text: resp.text,
            evidence: evidence.clone(),
            intent: resolved.intent.clone(),
            llm,
            error: None,
        },
        outcome => {
            let (code, message) = match outcome {
                Err(e) => (e.code().to_string(), e.to_string()),
                Ok(_) => ("MalformedResponse".to_string(), "empty answer".to_string()),
            };
            ExplanationReport {
                answer_text: format!("[generation failed: {code}] The raw evidence is attached."),
                evidence: evidence.clone(),
                intent: resolved.intent.clone(),
                grounding: None,
                llm,
                error: Some(ReportError { code: format!("GenerationFailed/{code}"), message }),
            }
        }
    }
}
