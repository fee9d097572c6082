//! Counterfactual credit attribution for cooperative multi-agent gridworlds.
//!
//! The crate bundles two pure-transition environments (level-based foraging
//! and a sparse-reward warehouse), simple policies to generate behaviour
//! (random, scripted greedy, tabular independent Q-learning), and three ways of
//! splitting a shared team reward among agents:
//!
//! * agent importance: the per-step difference reward `r - r_{-i}` averaged over
//!   an evaluation interval, `n` counterfactual steps per timestep;
//! * exact Shapley values over all `2^n` coalitions;
//! * Monte-Carlo Shapley estimates from sampled coalitions or permutations.
//!
//! The `evaluation` module has the statistics used to compare them and to
//! aggregate returns across runs, and `bench` times the methods as the agent
//! count grows.

pub mod attribution;
pub mod bench;
pub mod env;
pub mod evaluation;
pub mod policy;
pub mod rollout;
pub mod seed;

pub use env::{Action, AgentId, EnvError, Environment, Observation, StepOutcome};
