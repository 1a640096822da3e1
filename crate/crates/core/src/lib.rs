//! Explainable Monte Carlo tree search on a slippery grid world.
//!
//! The planner records every search tree; questions about a decision are
//! answered from those recorded statistics, growing the tree first when the
//! question targets a branch the search barely explored.

pub mod answerability;
pub mod config;
pub mod env;
pub mod eval;
pub mod expansion;
pub mod explain;
pub mod intent;
pub mod llm;
pub mod mcts;
pub mod par;
pub mod pipeline;
pub mod prompts;
pub mod querygen;
pub mod trace;
