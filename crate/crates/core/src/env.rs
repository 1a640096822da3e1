//! Slippery grid world ("frozen lake").
//!
//! The agent moves on a rectangular grid of frozen cells, holes and goals.
//! Every move slips: the intended direction and each of its two orthogonal
//! directions are taken with probability 1/3. The direction opposite to the
//! intended one is never taken. Moving off the grid leaves the agent in place.
//! Entering a goal yields reward 1 and ends the episode; entering a hole ends
//! the episode with reward 0.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The canonical 4x4 layout.
pub const DEFAULT_MAP: &str = "SFFF\nFHFH\nFFFH\nHFFG";

/// Sweep cap for [`value_iteration`].
pub const MAX_SWEEPS: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("state {0} is terminal")]
    TerminalState(StateId),
    #[error("state {0} is outside the grid")]
    StateOutOfRange(StateId),
    #[error("invalid map: {0}")]
    InvalidMap(String),
    #[error("value iteration did not converge within {0} sweeps")]
    NoConvergence(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    Start,
    Frozen,
    Hole,
    Goal,
}

impl CellKind {
    fn from_char(c: char) -> Option<Self> {
        match c {
            'S' => Some(CellKind::Start),
            'F' => Some(CellKind::Frozen),
            'H' => Some(CellKind::Hole),
            'G' => Some(CellKind::Goal),
            _ => None,
        }
    }

    fn as_char(self) -> char {
        match self {
            CellKind::Start => 'S',
            CellKind::Frozen => 'F',
            CellKind::Hole => 'H',
            CellKind::Goal => 'G',
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, CellKind::Hole | CellKind::Goal)
    }
}

/// Row-major cell index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateId(pub u32);

impl StateId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Movement direction. The integer encoding matches the common gym layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Action {
    Left = 0,
    Down = 1,
    Right = 2,
    Up = 3,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Left, Action::Down, Action::Right, Action::Up];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Left => "Left",
            Action::Down => "Down",
            Action::Right => "Right",
            Action::Up => "Up",
        }
    }

    /// Case-insensitive lookup of a display name.
    pub fn from_name(name: &str) -> Option<Action> {
        let name = name.trim();
        Action::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(name))
    }

    /// The direction taken when slipping `offset` quarter turns (0 = intended).
    fn rotated(self, offset: isize) -> Action {
        let i = (self as isize + offset).rem_euclid(4) as usize;
        Action::ALL[i]
    }

    /// Intended direction followed by its two orthogonal slips.
    pub fn slip_directions(self) -> [Action; 3] {
        [self.rotated(-1), self, self.rotated(1)]
    }

    pub fn opposite(self) -> Action {
        self.rotated(2)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Action::from_name(s).ok_or_else(|| EnvError::InvalidArgument(format!("unknown action {s:?}")))
    }
}

impl Serialize for Action {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(*self as u8)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = u8::deserialize(deserializer)?;
        Action::from_index(raw as usize)
            .ok_or_else(|| serde::de::Error::custom(format!("action index {raw} out of range 0..4")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionOutcome {
    pub next_state: StateId,
    pub probability: f64,
    /// 1.0 when `next_state` is a goal.
    pub reward: f64,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMap {
    rows: usize,
    cols: usize,
    cells: Vec<CellKind>,
}

impl Default for GridMap {
    fn default() -> Self {
        DEFAULT_MAP.parse().expect("default map is valid")
    }
}

impl FromStr for GridMap {
    type Err = EnvError;

    /// One row per line using `S`, `F`, `H`, `G`. Blank lines and
    /// surrounding whitespace are ignored.
    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let lines: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect();
        if lines.is_empty() {
            return Err(EnvError::InvalidMap("map is empty".into()));
        }
        let cols = lines[0].chars().count();
        let mut cells = Vec::with_capacity(cols * lines.len());
        for (r, line) in lines.iter().enumerate() {
            if line.chars().count() != cols {
                return Err(EnvError::InvalidMap(format!(
                    "row {r} has {} cells, expected {cols}",
                    line.chars().count()
                )));
            }
            for c in line.chars() {
                let kind = CellKind::from_char(c)
                    .ok_or_else(|| EnvError::InvalidMap(format!("unknown cell {c:?} in row {r}")))?;
                cells.push(kind);
            }
        }
        GridMap::new(lines.len(), cols, cells)
    }
}

impl fmt::Display for GridMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.rows {
            if r > 0 {
                f.write_str("\n")?;
            }
            for c in 0..self.cols {
                write!(f, "{}", self.cells[r * self.cols + c].as_char())?;
            }
        }
        Ok(())
    }
}

impl GridMap {
    pub fn new(rows: usize, cols: usize, cells: Vec<CellKind>) -> Result<Self, EnvError> {
        if rows == 0 || cols == 0 || rows * cols != cells.len() {
            return Err(EnvError::InvalidMap(format!(
                "{rows}x{cols} grid needs {} cells, got {}",
                rows * cols,
                cells.len()
            )));
        }
        if u32::try_from(cells.len()).is_err() {
            return Err(EnvError::InvalidMap("grid too large".into()));
        }
        let starts = cells.iter().filter(|&&c| c == CellKind::Start).count();
        if starts != 1 {
            return Err(EnvError::InvalidMap(format!("expected exactly one start, found {starts}")));
        }
        if !cells.contains(&CellKind::Goal) {
            return Err(EnvError::InvalidMap("no goal cell".into()));
        }
        Ok(GridMap { rows, cols, cells })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn num_states(&self) -> usize {
        self.cells.len()
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> {
        (0..self.cells.len() as u32).map(StateId)
    }

    pub fn start(&self) -> StateId {
        let i = self
            .cells
            .iter()
            .position(|&c| c == CellKind::Start)
            .expect("validated on construction");
        StateId(i as u32)
    }

    pub fn contains(&self, state: StateId) -> bool {
        state.index() < self.cells.len()
    }

    pub fn cell(&self, state: StateId) -> Result<CellKind, EnvError> {
        self.cells
            .get(state.index())
            .copied()
            .ok_or(EnvError::StateOutOfRange(state))
    }

    pub fn is_terminal(&self, state: StateId) -> bool {
        self.cells
            .get(state.index())
            .is_some_and(|c| c.is_terminal())
    }

    pub fn row_col(&self, state: StateId) -> (usize, usize) {
        (state.index() / self.cols, state.index() % self.cols)
    }

    /// Deterministic single move; off-grid moves stay put.
    pub fn step_towards(&self, state: StateId, dir: Action) -> StateId {
        let (r, c) = self.row_col(state);
        let (r, c) = match dir {
            Action::Left => (r, c.saturating_sub(1)),
            Action::Down => ((r + 1).min(self.rows - 1), c),
            Action::Right => (r, (c + 1).min(self.cols - 1)),
            Action::Up => (r.saturating_sub(1), c),
        };
        StateId((r * self.cols + c) as u32)
    }

    /// Outcome distribution of taking `action` in `state`.
    ///
    /// Outcomes are ordered by first appearance over the slip directions
    /// `[action - 1, action, action + 1]`; duplicates are merged.
    pub fn transition_distribution(
        &self,
        state: StateId,
        action: Action,
    ) -> Result<Vec<TransitionOutcome>, EnvError> {
        let kind = self.cell(state)?;
        if kind.is_terminal() {
            return Err(EnvError::TerminalState(state));
        }
        let mut merged: Vec<(StateId, u32)> = Vec::with_capacity(3);
        for dir in action.slip_directions() {
            let next = self.step_towards(state, dir);
            match merged.iter_mut().find(|(s, _)| *s == next) {
                Some((_, thirds)) => *thirds += 1,
                None => merged.push((next, 1)),
            }
        }
        Ok(merged
            .into_iter()
            .map(|(next, thirds)| {
                let next_kind = self.cells[next.index()];
                TransitionOutcome {
                    next_state: next,
                    probability: thirds as f64 / 3.0,
                    reward: if next_kind == CellKind::Goal { 1.0 } else { 0.0 },
                    terminal: next_kind.is_terminal(),
                }
            })
            .collect())
    }

    /// Draws one outcome. Consumes exactly one `f64` from `rng` per call.
    pub fn sample_transition<R: Rng + ?Sized>(
        &self,
        state: StateId,
        action: Action,
        rng: &mut R,
    ) -> Result<TransitionOutcome, EnvError> {
        let outcomes = self.transition_distribution(state, action)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for o in &outcomes {
            acc += o.probability;
            if u < acc {
                return Ok(*o);
            }
        }
        Ok(*outcomes.last().expect("at least one outcome"))
    }
}

/// Output of [`value_iteration`].
#[derive(Debug, Clone)]
pub struct ValueSolution {
    pub values: Vec<f64>,
    /// `action_values[s][a]`; zero for terminal states.
    pub action_values: Vec<[f64; 4]>,
    /// All actions within `tol` of the best action value, per state.
    /// Empty for terminal states.
    pub greedy: Vec<Vec<Action>>,
    pub sweeps: usize,
    pub residual: f64,
}

impl ValueSolution {
    pub fn value(&self, state: StateId) -> f64 {
        self.values[state.index()]
    }

    pub fn greedy_actions(&self, state: StateId) -> &[Action] {
        &self.greedy[state.index()]
    }
}

fn backup(map: &GridMap, values: &[f64], gamma: f64, state: StateId) -> [f64; 4] {
    let mut q = [0.0; 4];
    for a in Action::ALL {
        q[a.index()] = map
            .transition_distribution(state, a)
            .expect("non-terminal")
            .iter()
            .map(|o| o.probability * (o.reward + gamma * values[o.next_state.index()]))
            .sum();
    }
    q
}

/// Synchronous value iteration, used as a reference for the planner.
///
/// Terminal states have value zero; reward is collected on entering a goal.
pub fn value_iteration(map: &GridMap, gamma: f64, tol: f64) -> Result<ValueSolution, EnvError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(EnvError::InvalidArgument(format!("gamma {gamma} not in (0, 1]")));
    }
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(EnvError::InvalidArgument(format!("tol {tol} must be positive")));
    }
    let n = map.num_states();
    let mut values = vec![0.0; n];
    let mut sweeps = 0;
    let residual = loop {
        if sweeps >= MAX_SWEEPS {
            return Err(EnvError::NoConvergence(MAX_SWEEPS));
        }
        sweeps += 1;
        let mut next = vec![0.0; n];
        let mut residual: f64 = 0.0;
        for s in map.states().filter(|&s| !map.is_terminal(s)) {
            let q = backup(map, &values, gamma, s);
            let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            residual = residual.max((best - values[s.index()]).abs());
            next[s.index()] = best;
        }
        values = next;
        if residual < tol {
            break residual;
        }
    };

    let mut action_values = vec![[0.0; 4]; n];
    let mut greedy = vec![Vec::new(); n];
    for s in map.states().filter(|&s| !map.is_terminal(s)) {
        let q = backup(map, &values, gamma, s);
        let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        greedy[s.index()] = Action::ALL
            .into_iter()
            .filter(|a| best - q[a.index()] < tol)
            .collect();
        action_values[s.index()] = q;
    }
    Ok(ValueSolution {
        values,
        action_values,
        greedy,
        sweeps,
        residual,
    })
}
