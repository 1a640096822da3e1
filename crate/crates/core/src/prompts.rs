//! Versioned prompt catalog. Texts live under `prompts/` and are compiled in.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Intent,
    Explain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prompt {
    pub kind: PromptKind,
    pub id: &'static str,
    pub text: &'static str,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown {kind} prompt {id:?} (available: {available})")]
pub struct UnknownPrompt {
    pub kind: &'static str,
    pub id: String,
    pub available: String,
}

const CATALOG: &[Prompt] = &[
    Prompt { kind: PromptKind::Intent, id: "baseline", text: include_str!("../prompts/intent/baseline.txt") },
    Prompt { kind: PromptKind::Intent, id: "structured", text: include_str!("../prompts/intent/structured.txt") },
    Prompt { kind: PromptKind::Explain, id: "answer_first", text: include_str!("../prompts/explain/answer_first.txt") },
    Prompt { kind: PromptKind::Explain, id: "report", text: include_str!("../prompts/explain/report.txt") },
];

pub const DEFAULT_INTENT_PROMPT: &str = "structured";
pub const DEFAULT_EXPLAIN_PROMPT: &str = "answer_first";

pub fn catalog() -> &'static [Prompt] {
    CATALOG
}

pub fn lookup(kind: PromptKind, id: &str) -> Result<&'static Prompt, UnknownPrompt> {
    CATALOG.iter().find(|p| p.kind == kind && p.id == id).ok_or_else(|| UnknownPrompt {
        kind: match kind {
            PromptKind::Intent => "intent",
            PromptKind::Explain => "explain",
        },
        id: id.to_string(),
        available: CATALOG
            .iter()
            .filter(|p| p.kind == kind)
            .map(|p| p.id)
            .collect::<Vec<_>>()
            .join(", "),
    })
}
