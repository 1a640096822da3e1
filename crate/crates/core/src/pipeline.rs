//! The ask flow: extract, resolve, detect, expand if needed, explain, ground.

use serde::Serialize;
use thiserror::Error;

use crate::answerability::{detect, AnswerabilityVerdict};
use crate::config::ExplainerConfig;
use crate::env::GridMap;
use crate::expansion::{expand_targeted, next_expansion_seed, ExpansionError, ExpansionRequest};
use crate::explain::{assemble_evidence, generate_explanation, EvidenceError, ExplainSettings, ExplanationReport};
use crate::intent::{
    extract_intent, resolve_references, tree_summary, IntentError, IntentSettings, ResolvedIntent, StructuredIntent,
};
use crate::llm::ChatClient;
use crate::prompts::{lookup, PromptKind};
use crate::trace::{ExpansionRecord, RecordedTree};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Intent(#[from] IntentError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Expansion(#[from] ExpansionError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl PipelineError {
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Intent(e) => e.code(),
            PipelineError::Evidence(_) => "EvidenceUnavailable",
            PipelineError::Expansion(ExpansionError::TargetMissing(_)) => "TargetMissing",
            PipelineError::Expansion(ExpansionError::TargetTerminal(_)) => "TargetTerminal",
            PipelineError::Expansion(ExpansionError::ZeroBudget) => "ZeroBudget",
            PipelineError::Config(_) => "InvalidConfig",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AskOutcome {
    pub intent: StructuredIntent,
    pub resolved: ResolvedIntent,
    pub initial_verdict: AnswerabilityVerdict,
    /// Verdict on the tree the answer was built from.
    pub verdict: AnswerabilityVerdict,
    pub expansion_performed: bool,
    pub expansions: Vec<ExpansionRecord>,
    /// Absent when the question stayed unanswerable.
    pub report: Option<ExplanationReport>,
    #[serde(skip)]
    pub tree: RecordedTree,
}

/// Runs the full pipeline on one tree. The input tree is never modified;
/// any expansion lives in `AskOutcome::tree`.
pub fn ask(
    tree: &RecordedTree,
    map: &GridMap,
    question: &str,
    client: &dyn ChatClient,
    config: &ExplainerConfig,
    created_at: &str,
) -> Result<AskOutcome, PipelineError> {
    let intent_prompt = lookup(PromptKind::Intent, &config.prompts.intent_prompt)
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let explain_prompt = lookup(PromptKind::Explain, &config.prompts.explain_prompt)
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let model = client.model().to_string();

    let intent = extract_intent(
        question,
        &tree_summary(tree, map),
        client,
        &IntentSettings {
            model: &model,
            system_prompt: intent_prompt.text,
            temperature: config.llm.intent_temperature,
            max_tokens: config.llm.max_tokens,
        },
    )?;
    let mut current = tree.clone();
    let mut resolved = resolve_references(&intent, &current)?;
    let initial_verdict = detect(&resolved, &current, &config.thresholds);
    let mut verdict = initial_verdict.clone();
    let mut expansions = Vec::new();

    for _ in 0..config.expansion.rounds {
        if verdict.answerable {
            break;
        }
        let targets: Vec<_> = verdict.expansion_targets.iter().filter_map(|t| t.node_id.map(|n| (n, t.action))).collect();
        if targets.is_empty() {
            break;
        }
        for (node, action) in targets {
            let request = ExpansionRequest {
                target_node: node,
                forced_action: action,
                budget: config.expansion.budget,
                seed: next_expansion_seed(&current, node, action),
                created_at: created_at.to_string(),
            };
            current = expand_targeted(&current, map, &request)?;
            expansions.push(current.metadata.expansions.last().cloned().expect("expansion was just logged"));
        }
        resolved = resolve_references(&intent, &current)?;
        verdict = detect(&resolved, &current, &config.thresholds);
    }

    let report = if verdict.answerable {
        let evidence = assemble_evidence(&resolved, &current)?;
        Some(generate_explanation(
            question,
            &resolved,
            &evidence,
            client,
            &ExplainSettings {
                model: &model,
                prompt_id: explain_prompt.id,
                system_prompt: explain_prompt.text,
                temperature: config.llm.explanation_temperature,
                max_tokens: config.llm.max_tokens,
                lexicon: &config.grounding.lexicon,
            },
        ))
    } else {
        None
    };

    Ok(AskOutcome {
        intent,
        resolved,
        initial_verdict,
        verdict,
        expansion_performed: !expansions.is_empty(),
        expansions,
        report,
        tree: current,
    })
}
