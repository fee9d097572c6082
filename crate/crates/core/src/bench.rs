//! Wall-clock scaling of the attribution methods.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attribution::{AttributionError, AttributionOptions, Attributor, Method};
use crate::env::{AgentId, EnvError, Environment, Observation, StepOutcome};
use crate::evaluation::mean;
use crate::policy::AgentPolicy;
use crate::rollout::rollout;
use crate::seed::{derive_rng, derive_seed};

/// Wraps an environment and counts every call to `transition`.
#[derive(Debug)]
pub struct CountingEnv<E> {
    inner: E,
    transitions: AtomicU64,
}

impl<E> CountingEnv<E> {
    pub fn new(inner: E) -> Self {
        CountingEnv {
            inner,
            transitions: AtomicU64::new(0),
        }
    }

    pub fn transitions(&self) -> u64 {
        self.transitions.load(Ordering::Relaxed)
    }

    pub fn reset_count(&self) {
        self.transitions.store(0, Ordering::Relaxed);
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}

impl<E: Environment> Environment for CountingEnv<E> {
    type State = E::State;
    type Action = E::Action;

    fn name(&self) -> String {
        self.inner.name()
    }

    fn n_agents(&self) -> usize {
        self.inner.n_agents()
    }

    fn reset(&self, seed: u64) -> Result<Self::State, EnvError> {
        self.inner.reset(seed)
    }

    fn transition(&self, state: &Self::State, joint: &[Self::Action]) -> StepOutcome<Self::State> {
        self.transitions.fetch_add(1, Ordering::Relaxed);
        self.inner.transition(state, joint)
    }

    fn is_done(&self, state: &Self::State) -> bool {
        self.inner.is_done(state)
    }

    fn step_count(&self, state: &Self::State) -> u32 {
        self.inner.step_count(state)
    }

    fn observe(&self, state: &Self::State, agent: AgentId) -> Observation {
        self.inner.observe(state, agent)
    }

    fn noop_action(&self, state: &Self::State, agent: AgentId) -> Self::Action {
        self.inner.noop_action(state, agent)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub reps: usize,
    pub steps_per_rep: usize,
    pub seed: u64,
    pub parallel: bool,
    pub attribution: AttributionOptions,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            reps: 3,
            steps_per_rep: 10,
            seed: 0,
            parallel: false,
            attribution: AttributionOptions::default(),
        }
    }
}

/// What is timed per step. `Baseline` is the factual transition alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchMethod {
    Baseline,
    Attribution(Method),
}

impl BenchMethod {
    pub const IMPORTANCE: BenchMethod = BenchMethod::Attribution(Method::Importance);
    pub const EXACT_SHAPLEY: BenchMethod = BenchMethod::Attribution(Method::ExactShapley);

    pub fn as_str(self) -> &'static str {
        match self {
            BenchMethod::Baseline => "baseline",
            BenchMethod::Attribution(m) => m.as_str(),
        }
    }
}

impl std::str::FromStr for BenchMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(BenchMethod::Baseline),
            other => other.parse().map(BenchMethod::Attribution),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BenchOutcome {
    Measured {
        mean_s_per_step: f64,
        std_s_per_step: f64,
        evals_per_step: f64,
        /// Environment transitions per attributed step, from the counting
        /// wrapper.
        transitions_per_step: f64,
    },
    Skipped {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub scenario: String,
    pub n_agents: usize,
    pub method: BenchMethod,
    pub parallel: bool,
    pub outcome: BenchOutcome,
}

/// Counterfactual evaluations one step should cost, where that is fixed.
pub fn expected_evals(method: BenchMethod, n_agents: usize) -> Option<u64> {
    match method {
        BenchMethod::Baseline => Some(0),
        BenchMethod::Attribution(Method::Importance) => Some(n_agents as u64),
        BenchMethod::Attribution(Method::ExactShapley) => 1u64.checked_shl(n_agents as u32),
        BenchMethod::Attribution(Method::McShapley) => None,
    }
}

/// Environment transitions one step should cost, where that is fixed.
pub fn expected_transitions(method: BenchMethod, n_agents: usize) -> Option<u64> {
    match method {
        BenchMethod::Baseline => Some(1),
        BenchMethod::Attribution(Method::Importance) => Some(n_agents as u64 + 1),
        other => expected_evals(other, n_agents),
    }
}

type StepSample<E> = (<E as Environment>::State, Vec<<E as Environment>::Action>);

fn sample_steps<E: Environment>(env: &E, count: usize, seed: u64) -> Result<Vec<StepSample<E>>, EnvError> {
    let policies = vec![AgentPolicy::Random; env.n_agents()];
    let mut steps = Vec::with_capacity(count);
    let mut episode = 0u64;
    while steps.len() < count {
        let mut rng = derive_rng(seed, "bench-policy", episode);
        let trajectory = rollout(env, &policies, derive_seed(seed, "bench-reset", episode), &mut rng)?;
        steps.extend(
            trajectory
                .into_iter()
                .map(|t| (t.state, t.joint))
                .take(count - steps.len()),
        );
        episode += 1;
    }
    Ok(steps)
}

/// Times each method on each environment over states visited by random
/// policies. Exact Shapley above the cap is reported as skipped.
pub fn run_scaling<E: Environment>(
    envs: Vec<E>,
    methods: &[BenchMethod],
    config: &BenchConfig,
) -> Result<Vec<BenchResult>, AttributionError> {
    let mut results = Vec::new();
    for env in envs {
        let env = CountingEnv::new(env);
        let n = env.n_agents();
        let steps = sample_steps(&env, config.steps_per_rep.max(1), config.seed)?;
        let attributor = Attributor::new(&env)
            .with_proxy(config.attribution.proxy)
            .with_shapley_cap(config.attribution.shapley_cap)
            .with_parallel(config.parallel);
        for &method in methods {
            let mut result = BenchResult {
                scenario: env.name(),
                n_agents: n,
                method,
                parallel: config.parallel,
                outcome: BenchOutcome::Skipped { reason: String::new() },
            };
            if method == BenchMethod::EXACT_SHAPLEY && n > config.attribution.shapley_cap {
                result.outcome = BenchOutcome::Skipped {
                    reason: format!("{n} agents exceeds exact cap {}", config.attribution.shapley_cap),
                };
                results.push(result);
                continue;
            }
            let mut per_step = Vec::with_capacity(config.reps);
            let mut evals = 0u64;
            env.reset_count();
            for rep in 0..config.reps.max(1) {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "bench-proxy", rep as u64));
                let start = Instant::now();
                for (state, joint) in &steps {
                    match method {
                        BenchMethod::Baseline => {
                            std::hint::black_box(env.step(state, joint)?);
                        }
                        BenchMethod::Attribution(m) => {
                            let att = attributor.step(m, state, joint, &config.attribution, &mut rng)?;
                            evals += att.coalition_evals;
                        }
                    }
                }
                per_step.push(start.elapsed().as_secs_f64() / steps.len() as f64);
            }
            let calls = (steps.len() * per_step.len()) as f64;
            let m = mean(&per_step);
            let std = if per_step.len() > 1 {
                (per_step.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (per_step.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            result.outcome = BenchOutcome::Measured {
                mean_s_per_step: m,
                std_s_per_step: std,
                evals_per_step: evals as f64 / calls,
                transitions_per_step: env.transitions() as f64 / calls,
            };
            results.push(result);
        }
    }
    Ok(results)
}
