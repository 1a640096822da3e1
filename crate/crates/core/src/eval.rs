//! Annotated query sets and the batch evaluation harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::config::ExplainerConfig;
use crate::env::{Action, StateId};
use crate::explain::GroundingResult;
use crate::intent::{compare_fields, FieldMatch, QuestionType, StructuredIntent};
use crate::llm::{ChatClient, Rulebook};
use crate::mcts::UNSET_TIMESTAMP;
use crate::par::{self, Execution};
use crate::pipeline::ask;
use crate::trace::{load_trace, save_trace, RecordedTree, TraceError};

pub const QUERIES_FILE: &str = "queries.json";
pub const QUERY_SET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("query set is empty")]
    EmptyQuerySet,
    #[error("trace for sample {sample} failed to load: {source}")]
    TraceLoadFailure { sample: String, source: TraceError },
    #[error("invalid query set: {0}")]
    InvalidQuerySet(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Node,
    Path,
    General,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedTarget {
    pub state: StateId,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySample {
    pub id: String,
    pub question: String,
    /// Relative to the query-set directory, `/`-separated.
    pub trace_file: String,
    pub ground_truth_intent: StructuredIntent,
    pub answerable: bool,
    pub expansion_target: Option<AnnotatedTarget>,
    pub level: Level,
}

impl QuerySample {
    fn check(&self) -> Result<(), String> {
        if self.question.trim().is_empty() {
            return Err(format!("{}: empty question", self.id));
        }
        if !self.answerable && self.expansion_target.is_none() {
            return Err(format!("{}: non-answerable sample without expansion_target", self.id));
        }
        self.ground_truth_intent.check().map_err(|e| format!("{}: {e}", self.id))?;
        let expected = match self.ground_truth_intent.question_type {
            QuestionType::PathWhy => Level::Path,
            QuestionType::General => Level::General,
            _ => Level::Node,
        };
        if self.level != expected {
            return Err(format!("{}: level {:?} does not match question type", self.id, self.level));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryFile {
    version: u32,
    samples: Vec<QuerySample>,
}

/// Samples plus their loaded traces, keyed by `trace_file`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub samples: Vec<QuerySample>,
    pub traces: BTreeMap<String, RecordedTree>,
}

impl QuerySet {
    pub fn load(dir: &Path) -> Result<Self, EvalError> {
        let path = dir.join(QUERIES_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let file: QueryFile = serde_json::from_str(&text).map_err(|e| EvalError::InvalidQuerySet(e.to_string()))?;
        if file.version != QUERY_SET_VERSION {
            return Err(EvalError::InvalidQuerySet(format!("unsupported version {}", file.version)));
        }
        let mut traces = BTreeMap::new();
        for s in &file.samples {
            s.check().map_err(EvalError::InvalidQuerySet)?;
            if !traces.contains_key(&s.trace_file) {
                let tree = load_trace(&dir.join(&s.trace_file))
                    .map_err(|source| EvalError::TraceLoadFailure { sample: s.id.clone(), source })?;
                traces.insert(s.trace_file.clone(), tree);
            }
        }
        Ok(QuerySet { samples: file.samples, traces })
    }

    pub fn save(&self, dir: &Path) -> Result<(), EvalError> {
        for (rel, tree) in &self.traces {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            save_trace(tree, &path).map_err(|source| EvalError::TraceLoadFailure { sample: rel.clone(), source })?;
        }
        let file = QueryFile { version: QUERY_SET_VERSION, samples: self.samples.clone() };
        let mut text = serde_json::to_string_pretty(&file).expect("query set serializes");
        text.push('\n');
        let path = dir.join(QUERIES_FILE);
        std::fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn tree(&self, sample: &QuerySample) -> Option<&RecordedTree> {
        self.traces.get(&sample.trace_file)
    }
}

/// Canned intents and answers encoding the annotations of `samples`.
pub fn rulebook_for(samples: &[QuerySample]) -> Rulebook {
    let mut book = Rulebook::new();
    for s in samples {
        let i = &s.ground_truth_intent;
        let payload = json!({
            "matched": true,
            "question_type": i.question_type,
            "target_state": i.target_state,
            "target_action": i.target_action,
            "target_path": i.target_path,
            "raw_question": s.question,
        });
        book.insert(&s.question, payload.to_string(), None);
    }
    book
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub correct: u64,
    pub total: u64,
    /// `correct / total`; absent when nothing was counted.
    pub rate: Option<f64>,
}

impl Rate {
    fn of(flags: impl IntoIterator<Item = bool>) -> Self {
        let (mut correct, mut total) = (0, 0);
        for f in flags {
            total += 1;
            correct += f as u64;
        }
        Rate { correct, total, rate: (total > 0).then(|| correct as f64 / total as f64) }
    }

    pub fn is_perfect(&self) -> bool {
        self.correct == self.total
    }
}

impl std::fmt::Display for Rate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.rate {
            Some(r) => write!(f, "{}/{} ({:.1}%)", self.correct, self.total, r * 100.0),
            None => write!(f, "0/0 (n/a)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: String,
    pub level: Level,
    pub fields: FieldMatch,
    pub expected_answerable: bool,
    pub detected_answerable: bool,
    pub expected_target: Option<AnnotatedTarget>,
    pub detected_target: Option<(StateId, Option<Action>)>,
    pub answerability_correct: bool,
    pub expansion_performed: bool,
    pub final_answerable: bool,
    pub grounding: Option<GroundingResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentAccuracy {
    pub question_type: Rate,
    pub target_state: Rate,
    pub target_action: Rate,
    pub target_path: Rate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingRates {
    pub agent_action: Rate,
    pub risk: Rate,
    pub user_action: Rate,
    pub user_action_not_applicable: u64,
    pub all_passed: Rate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub intent_prompt: String,
    pub explain_prompt: String,
    pub samples: usize,
    pub intent: IntentAccuracy,
    pub answerability: Rate,
    pub grounding: GroundingRates,
    pub rows: Vec<SampleRow>,
}

fn evaluate_one(set: &QuerySet, sample: &QuerySample, client: &dyn ChatClient, config: &ExplainerConfig) -> SampleRow {
    let mut row = SampleRow {
        id: sample.id.clone(),
        level: sample.level,
        fields: FieldMatch { question_type: false, target_state: false, target_action: false, target_path: false },
        expected_answerable: sample.answerable,
        detected_answerable: false,
        expected_target: sample.expansion_target,
        detected_target: None,
        answerability_correct: false,
        expansion_performed: false,
        final_answerable: false,
        grounding: None,
        error: None,
    };
    let Some(tree) = set.tree(sample) else {
        row.error = Some("trace not loaded".into());
        return row;
    };
    let map = match tree.map() {
        Ok(m) => m,
        Err(e) => {
            row.error = Some(e.to_string());
            return row;
        }
    };
    let out = match ask(tree, &map, &sample.question, client, config, UNSET_TIMESTAMP) {
        Ok(o) => o,
        Err(e) => {
            row.error = Some(format!("{}: {e}", e.code()));
            return row;
        }
    };
    row.fields = compare_fields(&out.intent, &sample.ground_truth_intent);
    row.detected_answerable = out.initial_verdict.answerable;
    row.detected_target = out.initial_verdict.first_target();
    row.answerability_correct = row.detected_answerable == sample.answerable
        && (sample.answerable
            || sample.expansion_target.map(|t| (t.state, Some(t.action))) == row.detected_target);
    row.expansion_performed = out.expansion_performed;
    row.final_answerable = out.verdict.answerable;
    if let Some(report) = &out.report {
        row.grounding = report.grounding;
        if let Some(err) = &report.error {
            row.error = Some(format!("{}: {}", err.code, err.message));
        }
    }
    row
}

/// Runs the pipeline on every sample and aggregates the metrics. Samples run
/// concurrently (bounded by `config.eval.max_in_flight`); rows keep set order.
pub fn run_eval(set: &QuerySet, client: &dyn ChatClient, config: &ExplainerConfig) -> Result<EvalReport, EvalError> {
    run_eval_with(set, client, config, Execution::Parallel)
}

pub fn run_eval_with(
    set: &QuerySet,
    client: &dyn ChatClient,
    config: &ExplainerConfig,
    exec: Execution,
) -> Result<EvalReport, EvalError> {
    if set.samples.is_empty() {
        return Err(EvalError::EmptyQuerySet);
    }
    for s in &set.samples {
        if set.tree(s).is_none() {
            return Err(EvalError::TraceLoadFailure {
                sample: s.id.clone(),
                source: TraceError::SchemaViolation { path: s.trace_file.clone(), message: "trace not loaded".into() },
            });
        }
    }
    let rows = par::map_bounded(exec, config.eval.max_in_flight, &set.samples, |s| evaluate_one(set, s, client, config));

    let grounded = |f: fn(&GroundingResult) -> bool| Rate::of(rows.iter().map(|r| r.grounding.as_ref().is_some_and(f)));
    let user_flags: Vec<bool> = rows
        .iter()
        .filter_map(|r| match &r.grounding {
            Some(g) => g.mention_user_action,
            None => Some(false),
        })
        .collect();
    let not_applicable = rows.iter().filter(|r| r.grounding.is_some_and(|g| g.mention_user_action.is_none())).count();

    Ok(EvalReport {
        model: client.model().to_string(),
        intent_prompt: config.prompts.intent_prompt.clone(),
        explain_prompt: config.prompts.explain_prompt.clone(),
        samples: rows.len(),
        intent: IntentAccuracy {
            question_type: Rate::of(rows.iter().map(|r| r.fields.question_type)),
            target_state: Rate::of(rows.iter().map(|r| r.fields.target_state)),
            target_action: Rate::of(rows.iter().map(|r| r.fields.target_action)),
            target_path: Rate::of(rows.iter().map(|r| r.fields.target_path)),
        },
        answerability: Rate::of(rows.iter().map(|r| r.answerability_correct)),
        grounding: GroundingRates {
            agent_action: grounded(|g| g.mention_agent_action),
            risk: grounded(|g| g.mention_risk),
            user_action: Rate::of(user_flags),
            user_action_not_applicable: not_applicable as u64,
            all_passed: grounded(|g| g.all_passed),
        },
        rows,
    })
}

/// Reference rates reported for a hosted model, shown next to live runs.
pub const REFERENCE_RATES: [(&str, f64); 8] = [
    ("intent question_type", 0.857),
    ("intent target_state", 0.952),
    ("intent target_action", 0.714),
    ("intent target_path", 0.905),
    ("answerability", 1.0),
    ("grounding agent_action", 0.762),
    ("grounding risk", 0.905),
    ("grounding user_action", 1.0),
];

impl EvalReport {
    fn metrics(&self) -> Vec<(&'static str, &Rate)> {
        vec![
            ("intent question_type", &self.intent.question_type),
            ("intent target_state", &self.intent.target_state),
            ("intent target_action", &self.intent.target_action),
            ("intent target_path", &self.intent.target_path),
            ("answerability", &self.answerability),
            ("grounding agent_action", &self.grounding.agent_action),
            ("grounding risk", &self.grounding.risk),
            ("grounding user_action", &self.grounding.user_action),
            ("grounding all_passed", &self.grounding.all_passed),
        ]
    }

    /// Offline gate: every metric must be perfect. Returns the failing ones.
    pub fn gate_failures(&self) -> Vec<String> {
        self.metrics()
            .into_iter()
            .filter(|(_, r)| !r.is_perfect())
            .map(|(name, r)| format!("{name}: {r}"))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_text(&self, with_reference: bool) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model: {}  intent prompt: {}  explain prompt: {}", self.model, self.intent_prompt, self.explain_prompt);
        let _ = writeln!(s, "samples: {}", self.samples);
        let _ = writeln!(s);
        for (name, rate) in self.metrics() {
            let reference = REFERENCE_RATES
                .iter()
                .find(|(n, _)| *n == name)
                .filter(|_| with_reference)
                .map(|(_, r)| format!("   reference {:.1}%", r * 100.0))
                .unwrap_or_default();
            let _ = writeln!(s, "{name:<24} {rate}{reference}");
        }
        let _ = writeln!(s, "{:<24} {}", "user_action n/a", self.grounding.user_action_not_applicable);
        let _ = writeln!(s);
        let _ = writeln!(s, "id      level    type state action path  answerable(exp/det)  target(exp/det)        grounded");
        for r in &self.rows {
            let yn = |b: bool| if b { "ok" } else { "--" };
            let exp_t = r.expected_target.map(|t| format!("({},{})", t.state.0, t.action.name())).unwrap_or_else(|| "-".into());
            let det_t = match r.detected_target {
                Some((s, Some(a))) => format!("({},{})", s.0, a.name()),
                Some((s, None)) => format!("({},-)", s.0),
                None => "-".into(),
            };
            let grounded = match &r.grounding {
                Some(g) if g.all_passed => "pass",
                Some(_) => "FAIL",
                None => "none",
            };
            let _ = writeln!(
                s,
                "{:<7} {:<8} {:<4} {:<5} {:<6} {:<5} {:<5}/{:<5}          {:<10}/{:<10} {}{}",
                r.id,
                format!("{:?}", r.level).to_lowercase(),
                yn(r.fields.question_type),
                yn(r.fields.target_state),
                yn(r.fields.target_action),
                yn(r.fields.target_path),
                r.expected_answerable,
                r.detected_answerable,
                exp_t,
                det_t,
                grounded,
                r.error.as_deref().map(|e| format!("  error: {e}")).unwrap_or_default()
            );
        }
        s
    }
}

const BUNDLED_QUERIES: &str = include_str!("../data/queries/queries.json");

/// Samples of the bundled query set, compiled in.
pub fn bundled_samples() -> Vec<QuerySample> {
    let file: QueryFile = serde_json::from_str(BUNDLED_QUERIES).expect("bundled query set parses");
    file.samples
}

/// Rulebook for the deterministic double covering the bundled questions.
pub fn bundled_rulebook() -> Rulebook {
    rulebook_for(&bundled_samples())
}

/// Default location of the bundled query set inside this crate.
pub fn bundled_query_set_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join("queries")
}
