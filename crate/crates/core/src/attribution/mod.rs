//! Counterfactual attribution of a shared team reward.
//!
//! Everything here is built on one kernel, [`coalition_value`]: the team reward
//! of a single step taken from a fixed state when the agents outside a
//! coalition have their actions replaced by a removal proxy. On top of it:
//!
//! * [`Attributor::importance_step`] evaluates the grand coalition minus each
//!   agent in turn (the per-step difference reward `r^t - r^t_{-i}`);
//! * [`Attributor::exact_shapley_step`] evaluates all `2^n` coalitions once and
//!   combines marginals with the Shapley weights;
//! * [`monte_carlo`] estimates Shapley values from sampled coalitions or
//!   permutations.
//!
//! [`attribute_interval`] rolls out evaluation episodes and averages a
//! per-step method over every timestep of the interval.

mod monte_carlo;
mod shapley;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, AgentId, EnvError, Environment};
use crate::evaluation::population_variance;
use crate::policy::AgentPolicy;
use crate::rollout::rollout;
use crate::seed::{derive_rng, derive_seed};

pub use monte_carlo::{mc_shapley, McEstimate, Sampler};
pub use shapley::{shapley_by_permutations, shapley_weight, MAX_EXACT_AGENTS, MAX_PERMUTATION_AGENTS};

/// Default cap on agents for exact Shapley.
pub const DEFAULT_SHAPLEY_CAP: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttributionError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("{n} agents exceeds the cap of {cap} for this method")]
    TooManyAgents { n: usize, cap: usize },
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("need at least one episode")]
    NoEpisodes,
    #[error("{got} policies for {expected} agents")]
    PolicyCount { expected: usize, got: usize },
}

/// Set of agents treated as present; bit `i` is agent `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CoalitionMask(pub u64);

impl CoalitionMask {
    pub const MAX_AGENTS: usize = 63;

    pub const fn empty() -> Self {
        CoalitionMask(0)
    }

    pub fn grand(n: usize) -> Self {
        assert!(n <= Self::MAX_AGENTS, "at most {} agents", Self::MAX_AGENTS);
        CoalitionMask((1u64 << n) - 1)
    }

    pub fn contains(self, agent: usize) -> bool {
        self.0 >> agent & 1 == 1
    }

    pub fn with(self, agent: usize) -> Self {
        CoalitionMask(self.0 | 1 << agent)
    }

    pub fn without(self, agent: usize) -> Self {
        CoalitionMask(self.0 & !(1 << agent))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn members(self) -> impl Iterator<Item = usize> {
        (0..64).filter(move |&i| self.contains(i))
    }
}

/// How an absent agent's action is replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RemovalProxy {
    NoOp,
    RandomAction,
    /// Copy the action of a uniformly drawn present agent; no-op if nobody is
    /// present.
    CopyOtherAgent,
}

impl RemovalProxy {
    pub fn is_random(self) -> bool {
        !matches!(self, RemovalProxy::NoOp)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RemovalProxy::NoOp => "noop",
            RemovalProxy::RandomAction => "random",
            RemovalProxy::CopyOtherAgent => "copy",
        }
    }
}

impl std::str::FromStr for RemovalProxy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "noop" => Ok(RemovalProxy::NoOp),
            "random" => Ok(RemovalProxy::RandomAction),
            "copy" => Ok(RemovalProxy::CopyOtherAgent),
            other => Err(format!("unknown proxy {other:?} (expected noop|random|copy)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Importance,
    ExactShapley,
    McShapley,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Importance => "importance",
            Method::ExactShapley => "shapley",
            Method::McShapley => "mc-shapley",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "importance" => Ok(Method::Importance),
            "shapley" => Ok(Method::ExactShapley),
            "mc-shapley" | "mc_shapley" => Ok(Method::McShapley),
            other => Err(format!(
                "unknown method {other:?} (expected importance|shapley|mc-shapley)"
            )),
        }
    }
}

/// Attribution for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct StepAttribution {
    /// Timestep index within its interval (or 0 for a standalone call).
    pub t: usize,
    pub method: Method,
    pub values: Vec<f64>,
    /// Coalition evaluations: counterfactual steps for importance, one per
    /// coalition for exact Shapley.
    pub coalition_evals: u64,
    /// Every environment transition the call made.
    pub transitions: u64,
}

/// Joint action with every agent outside `mask` replaced according to `proxy`.
pub fn substitute<E: Environment, R: Rng + ?Sized>(
    env: &E,
    state: &E::State,
    joint: &[E::Action],
    mask: CoalitionMask,
    proxy: RemovalProxy,
    rng: &mut R,
) -> Vec<E::Action> {
    let present: Vec<usize> = if proxy == RemovalProxy::CopyOtherAgent {
        (0..joint.len()).filter(|&j| mask.contains(j)).collect()
    } else {
        Vec::new()
    };
    joint
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            if mask.contains(i) {
                return a;
            }
            match proxy {
                RemovalProxy::NoOp => env.noop_action(state, AgentId(i)),
                RemovalProxy::RandomAction => E::Action::ALL[rng.gen_range(0..E::Action::count())],
                RemovalProxy::CopyOtherAgent => {
                    if present.is_empty() {
                        env.noop_action(state, AgentId(i))
                    } else {
                        joint[present[rng.gen_range(0..present.len())]]
                    }
                }
            }
        })
        .collect()
}

/// Team reward of one step from `state` when only the agents in `mask` act as
/// chosen. `state` is not modified.
pub fn coalition_value<E: Environment, R: Rng + ?Sized>(
    env: &E,
    state: &E::State,
    joint: &[E::Action],
    mask: CoalitionMask,
    proxy: RemovalProxy,
    rng: &mut R,
) -> Result<f64, EnvError> {
    let actions = substitute(env, state, joint, mask, proxy, rng);
    Ok(env.step(state, &actions)?.team_reward)
}

/// Per-coalition rng for random proxies: a function of one draw from the
/// caller's rng and the coalition, so parallel and sequential evaluation give
/// identical results.
fn coalition_rng(base: u64, mask: CoalitionMask) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, "coalition", mask.0))
}

/// Per-step attribution with a fixed proxy and execution mode.
#[derive(Debug)]
pub struct Attributor<'e, E> {
    env: &'e E,
    proxy: RemovalProxy,
    shapley_cap: usize,
    parallel: bool,
}

impl<'e, E: Environment> Attributor<'e, E> {
    pub fn new(env: &'e E) -> Self {
        Attributor {
            env,
            proxy: RemovalProxy::NoOp,
            shapley_cap: DEFAULT_SHAPLEY_CAP,
            parallel: false,
        }
    }

    pub fn with_proxy(mut self, proxy: RemovalProxy) -> Self {
        self.proxy = proxy;
        self
    }

    pub fn with_shapley_cap(mut self, cap: usize) -> Self {
        self.shapley_cap = cap.min(MAX_EXACT_AGENTS);
        self
    }

    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn env(&self) -> &E {
        self.env
    }

    pub fn proxy(&self) -> RemovalProxy {
        self.proxy
    }

    fn base_seed<R: RngCore + ?Sized>(&self, rng: &mut R) -> u64 {
        if self.proxy.is_random() {
            rng.next_u64()
        } else {
            0
        }
    }

    /// Evaluates `v` on every mask in order. Results are in input order
    /// regardless of scheduling.
    fn values_of(
        &self,
        state: &E::State,
        joint: &[E::Action],
        masks: &[CoalitionMask],
        base: u64,
        counter: &AtomicU64,
    ) -> Result<Vec<f64>, EnvError> {
        let eval = |&mask: &CoalitionMask| {
            counter.fetch_add(1, Ordering::Relaxed);
            let mut rng = coalition_rng(base, mask);
            coalition_value(self.env, state, joint, mask, self.proxy, &mut rng)
        };
        if self.parallel {
            masks.par_iter().map(eval).collect()
        } else {
            masks.iter().map(eval).collect()
        }
    }

    /// `values[i] = r^t - r^t_{-i}`: the factual team reward minus the team
    /// reward with agent `i` removed. One factual and `n` counterfactual
    /// transitions.
    pub fn importance_step<R: Rng + ?Sized>(
        &self,
        state: &E::State,
        joint: &[E::Action],
        rng: &mut R,
    ) -> Result<StepAttribution, EnvError> {
        let n = self.env.n_agents();
        let factual = self.env.step(state, joint)?.team_reward;
        let base = self.base_seed(rng);
        let grand = CoalitionMask::grand(n);
        let masks: Vec<CoalitionMask> = (0..n).map(|i| grand.without(i)).collect();
        let counter = AtomicU64::new(0);
        let removed = self.values_of(state, joint, &masks, base, &counter)?;
        let evals = counter.into_inner();
        Ok(StepAttribution {
            t: 0,
            method: Method::Importance,
            values: removed.iter().map(|r| factual - r).collect(),
            coalition_evals: evals,
            transitions: evals + 1,
        })
    }

    /// Exact Shapley values of the one-step coalition game. Every one of the
    /// `2^n` coalitions is evaluated exactly once.
    pub fn exact_shapley_step<R: Rng + ?Sized>(
        &self,
        state: &E::State,
        joint: &[E::Action],
        rng: &mut R,
    ) -> Result<StepAttribution, AttributionError> {
        let n = self.env.n_agents();
        if n > self.shapley_cap {
            return Err(AttributionError::TooManyAgents {
                n,
                cap: self.shapley_cap,
            });
        }
        if self.env.is_done(state) {
            return Err(EnvError::EpisodeFinished.into());
        }
        let base = self.base_seed(rng);
        let masks: Vec<CoalitionMask> = (0..1u64 << n).map(CoalitionMask).collect();
        let counter = AtomicU64::new(0);
        let v = self.values_of(state, joint, &masks, base, &counter)?;
        let evals = counter.into_inner();
        Ok(StepAttribution {
            t: 0,
            method: Method::ExactShapley,
            values: shapley::combine(n, &v),
            coalition_evals: evals,
            transitions: evals,
        })
    }

    /// Monte-Carlo Shapley estimate for one step with `samples` draws per agent.
    pub fn mc_shapley_step<R: Rng + ?Sized>(
        &self,
        state: &E::State,
        joint: &[E::Action],
        samples: usize,
        sampler: Sampler,
        rng: &mut R,
    ) -> Result<StepAttribution, AttributionError> {
        let est = mc_shapley(
            self.env,
            &[(state.clone(), joint.to_vec())],
            samples,
            self.proxy,
            sampler,
            rng,
        )?;
        Ok(StepAttribution {
            t: 0,
            method: Method::McShapley,
            values: est.means,
            coalition_evals: est.coalition_evals,
            transitions: est.coalition_evals,
        })
    }

    pub fn step<R: Rng + ?Sized>(
        &self,
        method: Method,
        state: &E::State,
        joint: &[E::Action],
        options: &AttributionOptions,
        rng: &mut R,
    ) -> Result<StepAttribution, AttributionError> {
        match method {
            Method::Importance => Ok(self.importance_step(state, joint, rng)?),
            Method::ExactShapley => self.exact_shapley_step(state, joint, rng),
            Method::McShapley => self.mc_shapley_step(state, joint, options.mc_samples, options.sampler, rng),
        }
    }
}

/// Knobs for [`attribute_interval`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionOptions {
    pub proxy: RemovalProxy,
    /// Root seed for episode resets, policy sampling and random proxies.
    pub seed: u64,
    pub shapley_cap: usize,
    pub mc_samples: usize,
    pub sampler: Sampler,
    pub parallel: bool,
}

impl Default for AttributionOptions {
    fn default() -> Self {
        AttributionOptions {
            proxy: RemovalProxy::NoOp,
            seed: 0,
            shapley_cap: DEFAULT_SHAPLEY_CAP,
            mc_samples: 100,
            sampler: Sampler::Permutation,
            parallel: false,
        }
    }
}

/// One evaluation interval of attributions.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalAttribution {
    pub interval: usize,
    pub method: Method,
    pub episodes: usize,
    /// Total timesteps `T` across the interval's episodes.
    pub timesteps: usize,
    /// Per-agent mean of the per-step values over all `T` timesteps.
    pub means: Vec<f64>,
    /// Per-agent mean per-step individual reward, the ground truth.
    pub individual_means: Vec<f64>,
    pub mean_episode_return: f64,
    pub coalition_evals: u64,
    pub steps: Vec<StepAttribution>,
}

impl IntervalAttribution {
    /// Population variance of `means` across agents.
    pub fn variance_across_team(&self) -> f64 {
        population_variance(&self.means)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionReport {
    pub method: Method,
    pub n_agents: usize,
    pub intervals: Vec<IntervalAttribution>,
}

impl AttributionReport {
    pub fn variance_series(&self) -> Vec<f64> {
        self.intervals
            .iter()
            .map(IntervalAttribution::variance_across_team)
            .collect()
    }

    /// `series[agent][interval]` of interval means.
    pub fn mean_series(&self) -> Vec<Vec<f64>> {
        (0..self.n_agents)
            .map(|i| self.intervals.iter().map(|iv| iv.means[i]).collect())
            .collect()
    }

    /// `series[agent][interval]` of mean individual rewards.
    pub fn individual_series(&self) -> Vec<Vec<f64>> {
        (0..self.n_agents)
            .map(|i| self.intervals.iter().map(|iv| iv.individual_means[i]).collect())
            .collect()
    }
}

/// Rolls out `episodes` evaluation episodes and attributes every timestep.
///
/// Episode resets and policy sampling depend only on `(options.seed,
/// interval, episode)`, so different methods run on the same interval see the
/// same trajectories.
pub fn attribute_interval<E: Environment>(
    env: &E,
    policies: &[AgentPolicy],
    interval: usize,
    episodes: usize,
    method: Method,
    options: &AttributionOptions,
) -> Result<IntervalAttribution, AttributionError> {
    let n = env.n_agents();
    if episodes == 0 {
        return Err(AttributionError::NoEpisodes);
    }
    if policies.len() != n {
        return Err(AttributionError::PolicyCount {
            expected: n,
            got: policies.len(),
        });
    }
    if method == Method::ExactShapley && n > options.shapley_cap {
        return Err(AttributionError::TooManyAgents {
            n,
            cap: options.shapley_cap,
        });
    }
    let attributor = Attributor::new(env)
        .with_proxy(options.proxy)
        .with_shapley_cap(options.shapley_cap)
        .with_parallel(options.parallel);
    let interval_seed = derive_seed(options.seed, "interval", interval as u64);

    let mut steps = Vec::new();
    let mut sums = vec![0.0; n];
    let mut individual = vec![0.0; n];
    let mut returns = 0.0;
    let mut evals = 0;
    for episode in 0..episodes {
        let e = episode as u64;
        let mut policy_rng = derive_rng(interval_seed, "policy", e);
        let mut proxy_rng = derive_rng(interval_seed, "proxy", e);
        let trajectory = rollout(env, policies, derive_seed(interval_seed, "reset", e), &mut policy_rng)?;
        for tr in &trajectory {
            let mut att = attributor.step(method, &tr.state, &tr.joint, options, &mut proxy_rng)?;
            att.t = steps.len();
            for i in 0..n {
                sums[i] += att.values[i];
                individual[i] += tr.individual_rewards[i];
            }
            returns += tr.team_reward;
            evals += att.coalition_evals;
            steps.push(att);
        }
    }
    let t = steps.len().max(1) as f64;
    Ok(IntervalAttribution {
        interval,
        method,
        episodes,
        timesteps: steps.len(),
        means: sums.iter().map(|s| s / t).collect(),
        individual_means: individual.iter().map(|s| s / t).collect(),
        mean_episode_return: returns / episodes as f64,
        coalition_evals: evals,
        steps,
    })
}

/// Runs [`attribute_interval`] for `intervals` consecutive intervals.
pub fn attribute<E: Environment>(
    env: &E,
    policies: &[AgentPolicy],
    intervals: usize,
    episodes: usize,
    method: Method,
    options: &AttributionOptions,
) -> Result<AttributionReport, AttributionError> {
    let intervals = (0..intervals)
        .map(|k| attribute_interval(env, policies, k, episodes, method, options))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AttributionReport {
        method,
        n_agents: env.n_agents(),
        intervals,
    })
}
