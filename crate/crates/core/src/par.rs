//! Batch helpers that fan independent work out over rayon.
//!
//! Every helper takes an [`Execution`] so the sequential path stays
//! available for comparison; with the `parallel` feature disabled both
//! variants run sequentially. Results are always returned in input order and
//! do not depend on the execution mode.

use crate::env::{Action, GridMap, StateId};
use crate::mcts::{plan, PlanError, SearchParams};
use crate::trace::RecordedTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Order-preserving map over `items`.
pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Like [`map`], with at most `max_in_flight` items running at once.
pub fn map_bounded<T, R, F>(exec: Execution, max_in_flight: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && max_in_flight > 1 {
        use rayon::prelude::*;
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(max_in_flight).build() {
            return pool.install(|| items.par_iter().map(&f).collect());
        }
    }
    let _ = (exec, max_in_flight);
    items.iter().map(f).collect()
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(exec: Execution, n: u64, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(u64) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Plans once per seed from the same root.
pub fn plan_seeds(
    exec: Execution,
    map: &GridMap,
    root: StateId,
    params: &SearchParams,
    seeds: &[u64],
) -> Result<Vec<(Action, RecordedTree)>, PlanError> {
    self::map(exec, seeds, |&seed| plan(map, root, &SearchParams { seed, ..*params }))
        .into_iter()
        .collect()
}

/// Like [`plan_seeds`] but keeps only the recommended actions.
pub fn chosen_actions(
    exec: Execution,
    map: &GridMap,
    root: StateId,
    params: &SearchParams,
    seeds: &[u64],
) -> Result<Vec<Action>, PlanError> {
    self::map(exec, seeds, |&seed| {
        plan(map, root, &SearchParams { seed, ..*params }).map(|(a, _)| a)
    })
    .into_iter()
    .collect()
}
