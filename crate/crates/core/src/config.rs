//! Runtime configuration shared by the CLI and the HTTP service.
//!
//! Every section has defaults, so an empty TOML document is a valid config.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answerability::EvidenceThresholds;
use crate::env::{GridMap, DEFAULT_MAP};
use crate::expansion::DEFAULT_EXPANSION_BUDGET;
use crate::llm::{deterministic_double, ChatClient, LlmError};
#[cfg(feature = "live-llm")]
use crate::llm::{LiveClient, LiveConfig, ReqwestTransport, ENV_MODEL};
use crate::mcts::SearchParams;
use crate::prompts::{self, PromptKind, UnknownPrompt};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Prompt(#[from] UnknownPrompt),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmBackend {
    Live,
    #[default]
    Double,
}

impl std::str::FromStr for LlmBackend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(LlmBackend::Live),
            "double" => Ok(LlmBackend::Double),
            other => Err(format!("unknown llm backend {other:?} (expected live or double)")),
        }
    }
}

/// Which answerability detector runs. Only the rule set is implemented; `llm`
/// is accepted by the parser but rejected by [`ExplainerConfig::validate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    #[default]
    Rules,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSettings {
    pub backend: LlmBackend,
    /// Model name sent to the live endpoint; `EXPLAINER_LLM_MODEL` wins when set.
    pub model: String,
    pub intent_temperature: f32,
    pub explanation_temperature: f32,
    pub max_tokens: u32,
}

impl LlmSettings {
    /// Builds the configured client. The double answers from the bundled
    /// query set's rulebook; the live client reads its endpoint and key from
    /// the environment.
    pub fn client(&self) -> Result<Arc<dyn ChatClient>, LlmError> {
        match self.backend {
            LlmBackend::Double => Ok(Arc::new(deterministic_double(crate::eval::bundled_rulebook()))),
            LlmBackend::Live => self.live_client(),
        }
    }

    #[cfg(feature = "live-llm")]
    fn live_client(&self) -> Result<Arc<dyn ChatClient>, LlmError> {
        let config = LiveConfig::from_lookup(|k| {
            let v = std::env::var(k).ok().filter(|v| !v.trim().is_empty());
            if k == ENV_MODEL {
                v.or_else(|| Some(self.model.clone()))
            } else {
                v
            }
        })?;
        Ok(Arc::new(LiveClient::new(config, Arc::new(ReqwestTransport::default()))))
    }

    #[cfg(not(feature = "live-llm"))]
    fn live_client(&self) -> Result<Arc<dyn ChatClient>, LlmError> {
        Err(LlmError::InvalidRequest("built without the live-llm feature".into()))
    }
}

impl Default for LlmSettings {
    fn default() -> Self {
        LlmSettings {
            backend: LlmBackend::Double,
            model: "deterministic-double".to_string(),
            intent_temperature: 0.0,
            explanation_temperature: 0.3,
            max_tokens: 600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSettings {
    pub intent_prompt: String,
    pub explain_prompt: String,
}

impl Default for PromptSettings {
    fn default() -> Self {
        PromptSettings {
            intent_prompt: prompts::DEFAULT_INTENT_PROMPT.to_string(),
            explain_prompt: prompts::DEFAULT_EXPLAIN_PROMPT.to_string(),
        }
    }
}

pub const DEFAULT_RISK_LEXICON: [&str; 6] = ["risk", "hole", "fall", "fail", "danger", "slip"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundingSettings {
    pub lexicon: Vec<String>,
}

impl Default for GroundingSettings {
    fn default() -> Self {
        GroundingSettings { lexicon: DEFAULT_RISK_LEXICON.iter().map(|s| s.to_string()).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionSettings {
    pub budget: u64,
    /// Expand-then-redetect rounds per question.
    pub rounds: u32,
}

impl Default for ExpansionSettings {
    fn default() -> Self {
        ExpansionSettings { budget: DEFAULT_EXPANSION_BUDGET, rounds: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub max_in_flight: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { max_in_flight: 4 }
    }
}

/// Planner section; unlike [`SearchParams`] in a trace, any field may be omitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSettings {
    pub iteration_budget: u64,
    pub exploration_c: f64,
    pub gamma: f64,
    pub rollout_depth_cap: u32,
    pub seed: u64,
}

impl Default for PlannerSettings {
    fn default() -> Self {
        let p = SearchParams::default();
        PlannerSettings {
            iteration_budget: p.iteration_budget,
            exploration_c: p.exploration_c,
            gamma: p.gamma,
            rollout_depth_cap: p.rollout_depth_cap,
            seed: p.seed,
        }
    }
}

impl PlannerSettings {
    pub fn params(&self) -> SearchParams {
        SearchParams {
            iteration_budget: self.iteration_budget,
            exploration_c: self.exploration_c,
            gamma: self.gamma,
            rollout_depth_cap: self.rollout_depth_cap,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainerConfig {
    /// Rows of `S`, `F`, `H`, `G` separated by newlines or `/`.
    pub map: String,
    pub planner: PlannerSettings,
    pub thresholds: EvidenceThresholds,
    pub detector: DetectorKind,
    pub llm: LlmSettings,
    pub prompts: PromptSettings,
    pub grounding: GroundingSettings,
    pub expansion: ExpansionSettings,
    pub eval: EvalSettings,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        ExplainerConfig {
            map: DEFAULT_MAP.to_string(),
            planner: PlannerSettings::default(),
            thresholds: EvidenceThresholds::default(),
            detector: DetectorKind::Rules,
            llm: LlmSettings::default(),
            prompts: PromptSettings::default(),
            grounding: GroundingSettings::default(),
            expansion: ExpansionSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl ExplainerConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: ExplainerConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn grid_map(&self) -> Result<GridMap, ConfigError> {
        self.map.replace('/', "\n").parse().map_err(|e| ConfigError::Invalid(format!("map: {e}")))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.grid_map()?;
        self.planner.params().validate().map_err(|e| ConfigError::Invalid(format!("planner: {e}")))?;
        self.thresholds.validate().map_err(ConfigError::Invalid)?;
        if self.detector == DetectorKind::Llm {
            return Err(ConfigError::Invalid("detector = \"llm\" is reserved and not implemented".into()));
        }
        prompts::lookup(PromptKind::Intent, &self.prompts.intent_prompt)?;
        prompts::lookup(PromptKind::Explain, &self.prompts.explain_prompt)?;
        if self.expansion.budget == 0 {
            return Err(ConfigError::Invalid("expansion.budget must be at least 1".into()));
        }
        if self.eval.max_in_flight == 0 {
            return Err(ConfigError::Invalid("eval.max_in_flight must be at least 1".into()));
        }
        if self.grounding.lexicon.iter().any(|w| w.trim().is_empty()) {
            return Err(ConfigError::Invalid("grounding.lexicon contains an empty term".into()));
        }
        if !(self.llm.intent_temperature >= 0.0 && self.llm.explanation_temperature >= 0.0) {
            return Err(ConfigError::Invalid("llm temperatures must be non-negative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = ExplainerConfig::from_toml("").unwrap();
        assert_eq!(c, ExplainerConfig::default());
        assert_eq!(c.thresholds.min_edge_visits, 10);
        assert_eq!(c.thresholds.min_node_visits, 1);
        assert_eq!(c.expansion.budget, 500);
        assert_eq!(c.llm.intent_temperature, 0.0);
        assert_eq!(c.llm.explanation_temperature, 0.3);
        assert_eq!(c.grid_map().unwrap(), GridMap::default());
    }

    #[test]
    fn sections_override() {
        let c = ExplainerConfig::from_toml(
            r#"
map = "SF/HG"
[planner]
iteration_budget = 100
seed = 4
[thresholds]
min_edge_visits = 3
[prompts]
intent_prompt = "baseline"
[llm]
backend = "live"
"#,
        )
        .unwrap();
        assert_eq!(c.planner.iteration_budget, 100);
        assert_eq!(c.planner.params().gamma, 0.99);
        assert_eq!(c.thresholds.min_edge_visits, 3);
        assert_eq!(c.llm.backend, LlmBackend::Live);
        assert_eq!(c.grid_map().unwrap().num_states(), 4);
    }

    #[test]
    fn bad_values_are_rejected() {
        for doc in [
            "detector = \"llm\"",
            "[prompts]\nexplain_prompt = \"nope\"",
            "[thresholds]\nmin_edge_visits = 0",
            "[expansion]\nbudget = 0",
            "map = \"FFF\"",
            "unknown = 1",
        ] {
            assert!(ExplainerConfig::from_toml(doc).is_err(), "{doc}");
        }
    }
}
