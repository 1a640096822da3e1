//! Question intents: extraction through a chat client and resolution against
//! a recorded tree.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::env::{Action, GridMap, StateId};
use crate::llm::{ChatClient, ChatRequest, LlmError, ResponseFormat, QUESTION_PREFIX};
use crate::trace::{NodeId, NodeScope, RecordedTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    WhyAction,
    WhyNotAction,
    WhatIf,
    PathWhy,
    General,
}

impl QuestionType {
    pub const ALL: [QuestionType; 5] = [
        QuestionType::WhyAction,
        QuestionType::WhyNotAction,
        QuestionType::WhatIf,
        QuestionType::PathWhy,
        QuestionType::General,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::WhyAction => "why_action",
            QuestionType::WhyNotAction => "why_not_action",
            QuestionType::WhatIf => "what_if",
            QuestionType::PathWhy => "path_why",
            QuestionType::General => "general",
        }
    }

    fn needs_action(self) -> bool {
        matches!(self, QuestionType::WhyAction | QuestionType::WhyNotAction | QuestionType::WhatIf)
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A state as named in a question: the tree's root, or an explicit id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StateRef {
    Current,
    Id(StateId),
}

impl Serialize for StateRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            StateRef::Current => s.serialize_str("current"),
            StateRef::Id(id) => s.serialize_u32(id.0),
        }
    }
}

impl<'de> Deserialize<'de> for StateRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Id(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Id(i) => Ok(StateRef::Id(StateId(i))),
            Raw::Text(t) if t.eq_ignore_ascii_case("current") => Ok(StateRef::Current),
            Raw::Text(t) => t
                .trim()
                .parse::<u32>()
                .map(|i| StateRef::Id(StateId(i)))
                .map_err(|_| serde::de::Error::custom(format!("state must be an integer or \"current\", got {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathEntry {
    pub state: Option<StateRef>,
    /// Action name as written by the extractor; checked during resolution.
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredIntent {
    pub question_type: QuestionType,
    pub target_state: Option<StateRef>,
    pub target_action: Option<String>,
    pub target_path: Option<Vec<PathEntry>>,
    pub raw_question: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntentError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("could not parse an intent after a repair attempt: {message}")]
    UnparseableIntent { message: String, last_reply: String },
    #[error("unknown action {0:?} (expected Left, Down, Right or Up)")]
    UnknownAction(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

impl IntentError {
    pub fn code(&self) -> &'static str {
        match self {
            IntentError::EmptyQuestion => "EmptyQuestion",
            IntentError::UnparseableIntent { .. } => "UnparseableIntent",
            IntentError::UnknownAction(_) => "UnknownAction",
            IntentError::Llm(e) => e.code(),
        }
    }
}

impl StructuredIntent {
    /// Checks the per-type field requirements.
    pub fn check(&self) -> Result<(), String> {
        let t = self.question_type;
        if t.needs_action() && self.target_action.is_none() {
            return Err(format!("{t} requires target_action"));
        }
        if t == QuestionType::PathWhy {
            match &self.target_path {
                Some(p) if !p.is_empty() => {}
                _ => return Err("path_why requires a non-empty target_path".into()),
            }
        }
        if t == QuestionType::General
            && (self.target_state.is_some() || self.target_action.is_some() || self.target_path.is_some())
        {
            return Err("general questions carry no targets".into());
        }
        Ok(())
    }

    /// Every action the user named, in question order, parsed where possible.
    pub fn user_actions(&self) -> Vec<Action> {
        let mut out = Vec::new();
        let names = self
            .target_action
            .iter()
            .chain(self.target_path.iter().flatten().map(|e| &e.action));
        for a in names.filter_map(|n| Action::from_name(n)) {
            if !out.contains(&a) {
                out.push(a);
            }
        }
        out
    }
}

/// Wire shape of the extractor's reply.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IntentPayload {
    question_type: QuestionType,
    #[serde(default)]
    target_state: Option<StateRef>,
    #[serde(default)]
    target_action: Option<String>,
    #[serde(default)]
    target_path: Option<Vec<PathEntry>>,
    // Echoes the extractor may add; the asked question is always kept instead.
    #[serde(default, rename = "raw_question")]
    _raw_question: Option<String>,
    #[serde(default, rename = "matched")]
    _matched: Option<bool>,
}

fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else { return t };
    let rest = rest.trim_start_matches(|c: char| c.is_ascii_alphabetic());
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

/// Strictly parses one JSON intent object. Code fences are tolerated; extra
/// prose or unknown fields are not.
pub fn parse_intent(reply: &str, question: &str) -> Result<StructuredIntent, String> {
    let payload: IntentPayload = serde_json::from_str(strip_fences(reply)).map_err(|e| e.to_string())?;
    let intent = StructuredIntent {
        question_type: payload.question_type,
        target_state: payload.target_state,
        target_action: payload.target_action,
        target_path: payload.target_path,
        raw_question: question.to_string(),
    };
    intent.check()?;
    Ok(intent)
}

/// Text that lets the extractor ground references in the tree.
pub fn tree_summary(tree: &RecordedTree, map: &GridMap) -> String {
    let mut out = String::new();
    if let Some(root) = tree.root() {
        let (r, c) = map.row_col(root.state);
        out.push_str(&format!("Current (root) state: {} at row {r}, column {c}\n", root.state.0));
    }
    out.push_str(&format!(
        "Legal actions: {}\n",
        Action::ALL.iter().map(|a| a.name()).collect::<Vec<_>>().join(", ")
    ));
    let states: Vec<String> = tree.states().iter().map(|s| s.0.to_string()).collect();
    out.push_str(&format!("States in the search tree: {}\n", states.join(", ")));
    out.push_str(&format!("Grid ({} rows, {} columns):\n{map}\n", map.rows(), map.cols()));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntentSettings<'a> {
    pub model: &'a str,
    pub system_prompt: &'a str,
    pub temperature: f32,
    pub max_tokens: u32,
}

/// Asks the client for a structured intent, with one repair round.
pub fn extract_intent(
    question: &str,
    tree_summary: &str,
    client: &dyn ChatClient,
    settings: &IntentSettings<'_>,
) -> Result<StructuredIntent, IntentError> {
    let question = question.trim();
    if question.is_empty() {
        return Err(IntentError::EmptyQuestion);
    }
    let base = format!("Search tree summary:\n{tree_summary}\n{QUESTION_PREFIX}{question}\n");
    let mut request = ChatRequest {
        model: settings.model.to_string(),
        system_prompt: settings.system_prompt.to_string(),
        user_message: base.clone(),
        temperature: settings.temperature,
        max_tokens: settings.max_tokens,
        response_format: ResponseFormat::StructuredObject,
    };
    let first = client.complete(&request)?.text;
    let error = match parse_intent(&first, question) {
        Ok(intent) => return Ok(intent),
        Err(e) => e,
    };
    tracing::debug!(%error, "intent reply rejected, asking for a repair");
    request.user_message = format!(
        "{base}\nYour previous reply could not be used: {error}\nPrevious reply:\n{first}\n\
         Reply again with exactly one JSON object following the required fields.\n"
    );
    let second = client.complete(&request)?.text;
    parse_intent(&second, question)
        .map_err(|message| IntentError::UnparseableIntent { message, last_reply: second })
}

/// Why a reference could not be tied to the tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResolutionFailure {
    StateOutOfRange { state: StateId },
    StateNotInTree { state: StateId },
    EdgeMissing { node: NodeId, action: Action },
    /// A named path state is not an observed outcome of the previous hop.
    PathLinkMissing { hop: usize, state: StateId },
    /// The previous hop has no outcome to follow.
    PathStateUnknown { hop: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathHop {
    pub state: Option<StateId>,
    pub action: Action,
    pub node_id: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedIntent {
    pub intent: StructuredIntent,
    /// State the question is about (the root for "current" or an absent state).
    pub state: Option<StateId>,
    pub node_id: Option<NodeId>,
    pub action: Option<Action>,
    /// Edges the answer can cite; only edges present in the tree.
    pub edge_refs: Vec<(NodeId, Action)>,
    pub path: Option<Vec<PathHop>>,
    pub failures: Vec<ResolutionFailure>,
}

fn parse_action(name: &str) -> Result<Action, IntentError> {
    Action::from_name(name.trim()).ok_or_else(|| IntentError::UnknownAction(name.to_string()))
}

/// Ties the intent's references to node ids in `tree`.
pub fn resolve_references(intent: &StructuredIntent, tree: &RecordedTree) -> Result<ResolvedIntent, IntentError> {
    let action = intent.target_action.as_deref().map(parse_action).transpose()?;
    let path_actions = match &intent.target_path {
        Some(p) => Some(p.iter().map(|e| parse_action(&e.action)).collect::<Result<Vec<_>, _>>()?),
        None => None,
    };

    let index = tree.index();
    let root = tree.root();
    let num_states = tree.map().map(|m| m.num_states()).unwrap_or(usize::MAX);
    let mut failures = Vec::new();
    let mut edge_refs = Vec::new();

    let locate = |sref: Option<StateRef>, failures: &mut Vec<ResolutionFailure>| -> (Option<StateId>, Option<NodeId>) {
        match sref {
            None | Some(StateRef::Current) => (root.map(|r| r.state), root.map(|r| r.node_id)),
            Some(StateRef::Id(s)) if s.index() >= num_states => {
                failures.push(ResolutionFailure::StateOutOfRange { state: s });
                (Some(s), None)
            }
            Some(StateRef::Id(s)) => {
                let node = tree.find_node(s, NodeScope::RootFirst);
                if node.is_none() {
                    failures.push(ResolutionFailure::StateNotInTree { state: s });
                }
                (Some(s), node)
            }
        }
    };

    let (state, node_id);
    let mut path = None;

    if let (Some(entries), Some(actions)) = (&intent.target_path, path_actions) {
        let first_ref = entries[0].state.or(intent.target_state);
        let (s0, n0) = locate(first_ref, &mut failures);
        state = s0;
        node_id = n0;
        let mut hops: Vec<PathHop> = Vec::with_capacity(entries.len());
        for (i, (entry, act)) in entries.iter().zip(actions).enumerate() {
            let (hop_state, hop_node) = if i == 0 {
                (s0, n0)
            } else {
                let prev = &hops[i - 1];
                let prev_edge = prev.node_id.and_then(|n| index.edge(n, prev.action));
                match (entry.state, prev_edge) {
                    (Some(StateRef::Id(s)), Some(edge)) => match edge.children.get(&s) {
                        Some(child) => (Some(s), Some(*child)),
                        None => {
                            failures.push(ResolutionFailure::PathLinkMissing { hop: i, state: s });
                            (Some(s), None)
                        }
                    },
                    (Some(StateRef::Id(s)), None) => {
                        failures.push(ResolutionFailure::PathLinkMissing { hop: i, state: s });
                        (Some(s), None)
                    }
                    (_, Some(edge)) => match edge.most_visited_outcome() {
                        Some((s, _)) => (Some(s), edge.children.get(&s).copied()),
                        None => {
                            failures.push(ResolutionFailure::PathStateUnknown { hop: i });
                            (None, None)
                        }
                    },
                    (_, None) => {
                        failures.push(ResolutionFailure::PathStateUnknown { hop: i });
                        (None, None)
                    }
                }
            };
            if let Some(n) = hop_node {
                if index.edge(n, act).is_some() {
                    edge_refs.push((n, act));
                } else {
                    failures.push(ResolutionFailure::EdgeMissing { node: n, action: act });
                }
            }
            hops.push(PathHop { state: hop_state, action: act, node_id: hop_node });
        }
        path = Some(hops);
    } else if intent.question_type != QuestionType::General || intent.target_state.is_some() {
        let (s, n) = locate(intent.target_state, &mut failures);
        state = s;
        node_id = n;
        if let (Some(n), Some(a)) = (node_id, action) {
            if index.edge(n, a).is_some() {
                edge_refs.push((n, a));
            } else {
                failures.push(ResolutionFailure::EdgeMissing { node: n, action: a });
            }
        }
        if let Some(n) = node_id {
            if matches!(intent.question_type, QuestionType::WhyAction | QuestionType::WhyNotAction) {
                for a in Action::ALL {
                    if Some(a) != action && index.edge(n, a).is_some() {
                        edge_refs.push((n, a));
                    }
                }
            }
        }
    } else {
        state = root.map(|r| r.state);
        node_id = root.map(|r| r.node_id);
    }

    Ok(ResolvedIntent { intent: intent.clone(), state, node_id, action, edge_refs, path, failures })
}

/// Per-field agreement between an extracted intent and its annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMatch {
    pub question_type: bool,
    pub target_state: bool,
    pub target_action: bool,
    pub target_path: bool,
}

fn same_action(a: &str, b: &str) -> bool {
    match (Action::from_name(a.trim()), Action::from_name(b.trim())) {
        (Some(x), Some(y)) => x == y,
        _ => a.trim().eq_ignore_ascii_case(b.trim()),
    }
}

pub fn compare_fields(extracted: &StructuredIntent, truth: &StructuredIntent) -> FieldMatch {
    let target_action = match (&extracted.target_action, &truth.target_action) {
        (Some(a), Some(b)) => same_action(a, b),
        (None, None) => true,
        _ => false,
    };
    let target_path = match (&extracted.target_path, &truth.target_path) {
        (Some(a), Some(b)) => {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.state == y.state && same_action(&x.action, &y.action))
        }
        (None, None) => true,
        _ => false,
    };
    FieldMatch {
        question_type: extracted.question_type == truth.question_type,
        target_state: extracted.target_state == truth.target_state,
        target_action,
        target_path,
    }
}
