//! Environment abstraction shared by every simulator in the crate.
//!
//! States are plain values: [`Environment::step`] never mutates its input, so a
//! counterfactual branch is just another call on the same `&State`. All
//! randomness is confined to [`Environment::reset`]; transitions are
//! deterministic functions of `(state, joint action)`.

pub mod lbf;
pub mod warehouse;

use std::fmt::Debug;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lbf::{LbfAction, LbfEnv, LbfScenario, LbfState};
pub use warehouse::{WarehouseAction, WarehouseEnv, WarehouseScenario, WarehouseState};

/// Index of an agent within an environment, in `[0, n_agents)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("agent {agent}: action index {index} out of range (action set has {count} actions)")]
    InvalidAction { agent: usize, index: usize, count: usize },
    #[error("joint action has {got} entries, environment has {expected} agents")]
    JointLength { expected: usize, got: usize },
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("infeasible scenario: {0}")]
    InfeasibleScenario(String),
}

/// Scenario name did not match the expected grammar.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot parse scenario {name:?} at byte {offset}: {message}")]
pub struct ParseError {
    pub name: String,
    pub offset: usize,
    pub message: String,
}

/// A closed, finite per-agent action set.
pub trait Action: Copy + Eq + Debug + Send + Sync + 'static {
    /// Every action, in index order.
    const ALL: &'static [Self];

    /// The action under which an agent leaves the world untouched.
    const NOOP: Self;

    fn index(self) -> usize;

    fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    fn count() -> usize {
        Self::ALL.len()
    }
}

/// Result of one transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome<S> {
    pub next_state: S,
    /// Sum of `individual_rewards`.
    pub team_reward: f64,
    pub individual_rewards: Vec<f64>,
    pub done: bool,
}

/// Canonical integer encoding of what one agent sees.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Observation(pub Vec<i32>);

impl Observation {
    /// Stable 64-bit FNV-1a hash of the encoding. Used as the tabular policy key.
    pub fn hash64(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        for v in &self.0 {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(PRIME);
            }
        }
        h
    }
}

pub trait Environment: Send + Sync {
    type State: Clone + PartialEq + Debug + Send + Sync;
    type Action: Action;

    /// Scenario name this environment was built from.
    fn name(&self) -> String;

    fn n_agents(&self) -> usize;

    /// Deterministic in `seed`.
    fn reset(&self, seed: u64) -> Result<Self::State, EnvError>;

    /// Pure transition on a validated joint action of a live state.
    fn transition(&self, state: &Self::State, joint: &[Self::Action]) -> StepOutcome<Self::State>;

    fn is_done(&self, state: &Self::State) -> bool;

    /// Number of steps taken since reset.
    fn step_count(&self, state: &Self::State) -> u32;

    fn observe(&self, state: &Self::State, agent: AgentId) -> Observation;

    fn noop_action(&self, _state: &Self::State, _agent: AgentId) -> Self::Action {
        Self::Action::NOOP
    }

    fn step(&self, state: &Self::State, joint: &[Self::Action]) -> Result<StepOutcome<Self::State>, EnvError> {
        if self.is_done(state) {
            return Err(EnvError::EpisodeFinished);
        }
        if joint.len() != self.n_agents() {
            return Err(EnvError::JointLength {
                expected: self.n_agents(),
                got: joint.len(),
            });
        }
        Ok(self.transition(state, joint))
    }

    /// Decodes action indices, then steps.
    fn step_indices(&self, state: &Self::State, joint: &[usize]) -> Result<StepOutcome<Self::State>, EnvError> {
        let actions = decode_joint::<Self::Action>(joint)?;
        self.step(state, &actions)
    }
}

pub fn decode_joint<A: Action>(joint: &[usize]) -> Result<Vec<A>, EnvError> {
    joint
        .iter()
        .enumerate()
        .map(|(agent, &index)| {
            A::from_index(index).ok_or(EnvError::InvalidAction {
                agent,
                index,
                count: A::count(),
            })
        })
        .collect()
}

pub fn encode_joint<A: Action>(joint: &[A]) -> Vec<usize> {
    joint.iter().map(|a| a.index()).collect()
}

/// Grid coordinate; `x` is the column, `y` the row (row 0 at the top).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pos {
    pub x: i32,
    pub y: i32,
}

impl Pos {
    pub const fn new(x: i32, y: i32) -> Self {
        Pos { x, y }
    }

    pub fn manhattan(self, other: Pos) -> i32 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }

    pub fn offset(self, dx: i32, dy: i32) -> Pos {
        Pos::new(self.x + dx, self.y + dy)
    }

    pub fn neighbours(self) -> [Pos; 4] {
        [
            self.offset(0, -1),
            self.offset(0, 1),
            self.offset(-1, 0),
            self.offset(1, 0),
        ]
    }
}

/// Header line of an episode trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: String,
    pub scenario: String,
    pub seed: u64,
    pub policy: String,
}

pub const TRACE_SCHEMA: &str = "trace_v1";

/// One timestep of an episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub episode: u64,
    pub t: u32,
    pub actions: Vec<usize>,
    pub team_reward: f64,
    pub individual_rewards: Vec<f64>,
    pub done: bool,
}
