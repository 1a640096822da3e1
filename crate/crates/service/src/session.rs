//! Per-session episode state and trace revisions.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use explainer_core::env::{Action, GridMap, StateId, TransitionOutcome};
use explainer_core::mcts::SearchParams;
use explainer_core::trace::{save_trace, trace_file_name, ExpansionRecord, RecordedTree};

use crate::error::ApiError;

/// Where a trace revision lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRef {
    pub decision_step: u64,
    pub rev: u32,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub decision_step: u64,
    pub root_state: StateId,
    pub chosen_action: Action,
    pub sampled_outcome: TransitionOutcome,
    pub new_state: StateId,
    pub terminal: bool,
    pub trace_ref: TraceRef,
}

#[derive(Debug, Clone)]
pub struct Revision {
    pub tree: Arc<RecordedTree>,
    /// Revision this one was expanded from; `None` for the planned trace.
    pub base: Option<u32>,
    pub trace_ref: TraceRef,
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub map: GridMap,
    pub params: SearchParams,
    pub env_seed: u64,
    pub env_rng: ChaCha8Rng,
    pub state: StateId,
    pub finished: bool,
    pub steps: Vec<StepRecord>,
    /// `revisions[k][r]` is revision `r` of decision step `k`.
    pub revisions: Vec<Vec<Revision>>,
    pub dir: PathBuf,
}

impl Session {
    pub fn new(id: String, map: GridMap, params: SearchParams, env_seed: u64, root: &Path) -> Self {
        let state = map.start();
        Session {
            dir: root.join(&id),
            id,
            map,
            params,
            env_seed,
            env_rng: ChaCha8Rng::seed_from_u64(env_seed),
            state,
            finished: false,
            steps: Vec::new(),
            revisions: Vec::new(),
        }
    }

    pub fn next_step(&self) -> u64 {
        self.steps.len() as u64
    }

    /// Planner settings for decision step `k`: each step gets its own seed.
    pub fn step_params(&self, k: u64) -> SearchParams {
        SearchParams { seed: self.params.seed.wrapping_add(k), ..self.params }
    }

    pub fn revision(&self, step: u64, rev: Option<u32>) -> Result<(u32, &Revision), ApiError> {
        let revs = self
            .revisions
            .get(step as usize)
            .ok_or_else(|| ApiError::step_not_found(step, self.steps.len()))?;
        let r = rev.unwrap_or(revs.len() as u32 - 1);
        revs.get(r as usize)
            .map(|v| (r, v))
            .ok_or_else(|| ApiError::revision_not_found(step, r, revs.len()))
    }

    fn persist(&self, tree: &RecordedTree, step: u64, rev: u32) -> Result<TraceRef, ApiError> {
        let file = trace_file_name(step, rev);
        save_trace(tree, &self.dir.join(&file)).map_err(|e| ApiError::internal(format!("saving {file}: {e}")))?;
        Ok(TraceRef { decision_step: step, rev, file })
    }

    /// Stores the planned trace for the next step and advances the episode.
    pub fn record_step(
        &mut self,
        tree: RecordedTree,
        outcome: TransitionOutcome,
    ) -> Result<StepRecord, ApiError> {
        let k = self.next_step();
        let trace_ref = self.persist(&tree, k, 0)?;
        let record = StepRecord {
            decision_step: k,
            root_state: self.state,
            chosen_action: tree.metadata.chosen_action,
            sampled_outcome: outcome,
            new_state: outcome.next_state,
            terminal: outcome.terminal,
            trace_ref: trace_ref.clone(),
        };
        self.revisions.push(vec![Revision { tree: Arc::new(tree), base: None, trace_ref }]);
        self.steps.push(record.clone());
        self.state = outcome.next_state;
        self.finished = outcome.terminal;
        Ok(record)
    }

    /// Returns the revision holding `tree`, storing it as a new one unless an
    /// identical expansion of the same base already exists. Identity ignores
    /// expansion timestamps, so repeating a question reuses the revision.
    pub fn adopt_expansion(&mut self, step: u64, base: u32, tree: RecordedTree) -> Result<u32, ApiError> {
        let key = expansion_key(&tree);
        let revs = &self.revisions[step as usize];
        if let Some(r) = revs.iter().position(|r| r.base == Some(base) && expansion_key(&r.tree) == key) {
            return Ok(r as u32);
        }
        let rev = revs.len() as u32;
        let trace_ref = self.persist(&tree, step, rev)?;
        self.revisions[step as usize].push(Revision { tree: Arc::new(tree), base: Some(base), trace_ref });
        Ok(rev)
    }
}

fn expansion_key(tree: &RecordedTree) -> Vec<ExpansionRecord> {
    tree.metadata
        .expansions
        .iter()
        .map(|x| ExpansionRecord { created_at: String::new(), ..x.clone() })
        .collect()
}
