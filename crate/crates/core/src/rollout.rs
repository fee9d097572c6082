//! Episode rollouts under a set of per-agent policies.

use rand::Rng;

use crate::env::{Action, AgentId, EnvError, Environment};
use crate::policy::AgentPolicy;

/// One recorded timestep: the state the joint action was taken in, and what
/// came out of it.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<S, A> {
    pub state: S,
    pub joint: Vec<A>,
    pub team_reward: f64,
    pub individual_rewards: Vec<f64>,
    pub done: bool,
}

/// Picks one action per agent. Observations are only computed for policies
/// that read them.
pub fn joint_action<E: Environment, R: Rng + ?Sized>(
    env: &E,
    state: &E::State,
    policies: &[AgentPolicy],
    rng: &mut R,
) -> Vec<E::Action> {
    debug_assert_eq!(policies.len(), env.n_agents());
    policies
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let obs = p.needs_observation().then(|| env.observe(state, AgentId(i)));
            let idx = p.act(obs.as_ref(), E::Action::count(), rng);
            E::Action::from_index(idx).unwrap_or(E::Action::NOOP)
        })
        .collect()
}

/// Transitions of one episode.
pub type Episode<E> = Vec<Transition<<E as Environment>::State, <E as Environment>::Action>>;

/// Runs one episode from `reset(reset_seed)` to termination.
pub fn rollout<E: Environment, R: Rng + ?Sized>(
    env: &E,
    policies: &[AgentPolicy],
    reset_seed: u64,
    rng: &mut R,
) -> Result<Episode<E>, EnvError> {
    let mut state = env.reset(reset_seed)?;
    let mut steps = Vec::new();
    while !env.is_done(&state) {
        let joint = joint_action(env, &state, policies, rng);
        let out = env.step(&state, &joint)?;
        let next = out.next_state;
        steps.push(Transition {
            state,
            joint,
            team_reward: out.team_reward,
            individual_rewards: out.individual_rewards,
            done: out.done,
        });
        state = next;
    }
    Ok(steps)
}

/// Episode return without keeping the trajectory.
pub fn episode_return<E: Environment, R: Rng + ?Sized>(
    env: &E,
    policies: &[AgentPolicy],
    reset_seed: u64,
    rng: &mut R,
) -> Result<f64, EnvError> {
    let mut state = env.reset(reset_seed)?;
    let mut total = 0.0;
    while !env.is_done(&state) {
        let joint = joint_action(env, &state, policies, rng);
        let out = env.step(&state, &joint)?;
        total += out.team_reward;
        state = out.next_state;
    }
    Ok(total)
}
