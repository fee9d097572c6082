//! Sampled Shapley estimates.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{coalition_value, AttributionError, CoalitionMask, RemovalProxy};
use crate::env::Environment;
use crate::evaluation::mean_and_std_error;

/// How the coalition for one marginal-contribution sample is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sampler {
    /// Each other agent joins independently with probability 1/2. Every subset
    /// is equally likely, which does not match the Shapley weighting, so the
    /// estimate is biased towards mid-sized coalitions.
    UniformCoalition,
    /// The agents preceding `i` in a uniformly random ordering. Unbiased.
    Permutation,
}

impl Sampler {
    pub fn as_str(self) -> &'static str {
        match self {
            Sampler::UniformCoalition => "uniform",
            Sampler::Permutation => "permutation",
        }
    }
}

impl std::str::FromStr for Sampler {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Sampler::UniformCoalition),
            "permutation" => Ok(Sampler::Permutation),
            other => Err(format!("unknown sampler {other:?} (expected uniform|permutation)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub means: Vec<f64>,
    /// Standard error of each mean over all its samples.
    pub std_errors: Vec<f64>,
    pub samples_per_agent: usize,
    pub coalition_evals: u64,
}

fn draw<R: Rng + ?Sized>(n: usize, agent: usize, sampler: Sampler, order: &mut [usize], rng: &mut R) -> CoalitionMask {
    match sampler {
        Sampler::UniformCoalition => {
            let bits: u64 = rng.gen::<u64>() & CoalitionMask::grand(n).0;
            CoalitionMask(bits).without(agent)
        }
        Sampler::Permutation => {
            order.shuffle(rng);
            order
                .iter()
                .take_while(|&&j| j != agent)
                .fold(CoalitionMask::empty(), |m, &j| m.with(j))
        }
    }
}

/// Estimates per-agent Shapley values averaged over `steps`, drawing
/// `samples` coalitions per agent per step. With the deterministic no-op
/// proxy, coalition values are cached within a step.
pub fn mc_shapley<E: Environment, R: Rng + ?Sized>(
    env: &E,
    steps: &[(E::State, Vec<E::Action>)],
    samples: usize,
    proxy: RemovalProxy,
    sampler: Sampler,
    rng: &mut R,
) -> Result<McEstimate, AttributionError> {
    let n = env.n_agents();
    if samples == 0 {
        return Err(AttributionError::NoSamples);
    }
    if n > CoalitionMask::MAX_AGENTS {
        return Err(AttributionError::TooManyAgents {
            n,
            cap: CoalitionMask::MAX_AGENTS,
        });
    }
    let mut marginals = vec![Vec::with_capacity(steps.len() * samples); n];
    let mut evals = 0u64;
    let mut order: Vec<usize> = (0..n).collect();
    for (state, joint) in steps {
        if env.is_done(state) {
            return Err(crate::env::EnvError::EpisodeFinished.into());
        }
        let mut cache: HashMap<CoalitionMask, f64> = HashMap::new();
        let mut value = |mask: CoalitionMask, rng: &mut R| -> Result<f64, AttributionError> {
            if proxy == RemovalProxy::NoOp {
                if let Some(&v) = cache.get(&mask) {
                    return Ok(v);
                }
            }
            evals += 1;
            let v = coalition_value(env, state, joint, mask, proxy, rng)?;
            if proxy == RemovalProxy::NoOp {
                cache.insert(mask, v);
            }
            Ok(v)
        };
        for (i, out) in marginals.iter_mut().enumerate() {
            for _ in 0..samples {
                let c = draw(n, i, sampler, &mut order, rng);
                let with = value(c.with(i), rng)?;
                let without = value(c, rng)?;
                out.push(with - without);
            }
        }
    }
    let (means, std_errors) = marginals.iter().map(|m| mean_and_std_error(m)).unzip();
    Ok(McEstimate {
        means,
        std_errors,
        samples_per_agent: steps.len() * samples,
        coalition_evals: evals,
    })
}
