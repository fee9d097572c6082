//! Behaviour to attribute: random, idle, a scripted greedy forager, and
//! tabular independent Q-learners trained on the shared team reward.
//!
//! Policies work on action indices so the same tables serve both
//! environments. Q-tables are keyed by [`Observation::hash64`]; hash
//! collisions merge states and are accepted at this scale.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

use crate::env::lbf::{CELL_EMPTY, CELL_FOOD_BASE, OBS_HEADER_LEN};
use crate::env::{Action, AgentId, EnvError, Environment, Observation};
use crate::evaluation::{mean_and_std_error, IntervalRecord};
use crate::rollout::episode_return;
use crate::seed::{derive_rng, derive_seed};

pub const POLICY_SCHEMA: &str = "policy_v1";

/// Greedy tie-break order over moves: up, down, left, right.
const GREEDY_MOVES: [(usize, i32, i32); 4] = [(1, 0, -1), (2, 0, 1), (3, -1, 0), (4, 1, 0)];
const LOAD: usize = 5;
const NOOP: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub n_actions: usize,
    pub epsilon: f64,
    pub values: HashMap<u64, Vec<f64>>,
}

impl QTable {
    pub fn new(n_actions: usize, epsilon: f64) -> Self {
        QTable {
            n_actions,
            epsilon,
            values: HashMap::new(),
        }
    }

    pub fn row(&self, key: u64) -> Option<&[f64]> {
        self.values.get(&key).map(Vec::as_slice)
    }

    fn row_mut(&mut self, key: u64) -> &mut Vec<f64> {
        let n = self.n_actions;
        self.values.entry(key).or_insert_with(|| vec![0.0; n])
    }

    pub fn max_value(&self, key: u64) -> f64 {
        self.row(key)
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .unwrap_or(0.0)
    }

    /// Highest-valued action, lowest index on ties. Unseen keys give action 0.
    pub fn greedy(&self, key: u64) -> usize {
        let Some(row) = self.row(key) else { return 0 };
        let mut best = 0;
        for (a, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = a;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentPolicy {
    /// Uniform over the action set.
    Random,
    /// Always the no-op action.
    Idle,
    /// Level-based foraging only: walk to the nearest visible food and load
    /// when adjacent.
    GreedyLbf,
    TabularQ(QTable),
}

impl AgentPolicy {
    pub fn needs_observation(&self) -> bool {
        matches!(self, AgentPolicy::GreedyLbf | AgentPolicy::TabularQ(_))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AgentPolicy::Random => "random",
            AgentPolicy::Idle => "idle",
            AgentPolicy::GreedyLbf => "greedy",
            AgentPolicy::TabularQ(_) => "tabular_q",
        }
    }

    /// Action index for one agent.
    pub fn act<R: Rng + ?Sized>(&self, obs: Option<&Observation>, n_actions: usize, rng: &mut R) -> usize {
        match self {
            AgentPolicy::Random => rng.gen_range(0..n_actions),
            AgentPolicy::Idle => NOOP,
            AgentPolicy::GreedyLbf => obs.map_or(NOOP, greedy_lbf),
            AgentPolicy::TabularQ(q) => {
                let key = obs.map_or(0, Observation::hash64);
                epsilon_greedy(q, key, rng)
            }
        }
    }
}

fn epsilon_greedy<R: Rng + ?Sized>(q: &QTable, key: u64, rng: &mut R) -> usize {
    if q.epsilon > 0.0 && rng.gen::<f64>() < q.epsilon {
        rng.gen_range(0..q.n_actions)
    } else {
        q.greedy(key)
    }
}

/// Scripted forager over an LBF observation.
fn greedy_lbf(obs: &Observation) -> usize {
    let o = &obs.0;
    let (ox, oy, w, h) = (o[1], o[2], o[3], o[4]);
    let cell = |x: i32, y: i32| -> Option<i32> {
        (x >= 0 && y >= 0 && x < w && y < h).then(|| o[OBS_HEADER_LEN + (y * w + x) as usize])
    };

    // Nearest food, first in row-major order on ties.
    let mut target: Option<(i32, i32, i32)> = None;
    for y in 0..h {
        for x in 0..w {
            if cell(x, y).is_some_and(|c| c > CELL_FOOD_BASE) {
                let d = (x - ox).abs() + (y - oy).abs();
                if target.is_none_or(|(_, _, best)| d < best) {
                    target = Some((x, y, d));
                }
            }
        }
    }
    let Some((tx, ty, d)) = target else { return NOOP };
    if d == 1 {
        return LOAD;
    }

    let closer: Vec<(usize, i32, i32)> = GREEDY_MOVES
        .iter()
        .copied()
        .filter(|&(_, dx, dy)| (ox + dx - tx).abs() + (oy + dy - ty).abs() < d)
        .collect();
    closer
        .iter()
        .find(|&&(_, dx, dy)| cell(ox + dx, oy + dy) == Some(CELL_EMPTY))
        .or(closer.first())
        .map_or(NOOP, |&(a, _, _)| a)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Range(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub episodes: u64,
    pub learning_rate: f64,
    pub discount: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub anneal_episodes: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 20_000,
            learning_rate: 0.1,
            discount: 0.95,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            anneal_episodes: 10_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Range(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning rate must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return bad("discount must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("epsilon must lie in [0, 1]");
        }
        Ok(())
    }

    /// Linear anneal from start to end over `anneal_episodes`, then flat.
    pub fn epsilon_at(&self, episode: u64) -> f64 {
        if self.anneal_episodes == 0 || episode >= self.anneal_episodes {
            return self.epsilon_end;
        }
        let frac = episode as f64 / self.anneal_episodes as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// Evaluation schedule during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSchedule {
    /// Number of evaluation points, spread evenly from episode 0 to the end.
    pub intervals: usize,
    pub episodes_per_interval: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedIql {
    /// Final tables with epsilon set to zero.
    pub tables: Vec<QTable>,
    pub episode_returns: Vec<f64>,
    /// Greedy evaluations; the best one so far keeps its snapshot.
    pub curve: Vec<IntervalRecord<Vec<QTable>>>,
}

impl TrainedIql {
    pub fn policies(&self) -> Vec<AgentPolicy> {
        self.tables.iter().cloned().map(AgentPolicy::TabularQ).collect()
    }
}

pub fn greedy_policies(tables: &[QTable]) -> Vec<AgentPolicy> {
    tables
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.epsilon = 0.0;
            AgentPolicy::TabularQ(t)
        })
        .collect()
}

/// Mean greedy return over `episodes` evaluation episodes.
pub fn evaluate<E: Environment>(
    env: &E,
    policies: &[AgentPolicy],
    episodes: usize,
    seed: u64,
    tag: &str,
) -> Result<Vec<f64>, EnvError> {
    let mut rng = derive_rng(seed, tag, 0);
    (0..episodes)
        .map(|e| episode_return(env, policies, derive_seed(seed, tag, e as u64 + 1), &mut rng))
        .collect()
}

/// One Q-learning update. `next` is the successor observation, or `None` if
/// the episode ended, in which case nothing is bootstrapped.
pub fn q_update(table: &mut QTable, obs: u64, action: usize, reward: f64, next: Option<u64>, alpha: f64, gamma: f64) {
    let bootstrap = next.map_or(0.0, |o| table.max_value(o));
    let target = reward + gamma * bootstrap;
    let q = &mut table.row_mut(obs)[action];
    *q += alpha * (target - *q);
}

/// Independent tabular Q-learning. Every agent updates its own table from its
/// own observation and the shared team reward.
pub fn train_iql<E: Environment>(
    env: &E,
    config: &TrainConfig,
    schedule: Option<EvalSchedule>,
) -> Result<TrainedIql, EnvError> {
    train_iql_with(env, config, schedule, |_, _| Ok::<(), EnvError>(()))
}

/// [`train_iql`] with a hook called at every evaluation point with the
/// interval record and the greedy policies evaluated there.
pub fn train_iql_with<E, F, Err>(
    env: &E,
    config: &TrainConfig,
    schedule: Option<EvalSchedule>,
    mut on_eval: F,
) -> Result<TrainedIql, Err>
where
    E: Environment,
    F: FnMut(&IntervalRecord<()>, &[AgentPolicy]) -> Result<(), Err>,
    Err: From<EnvError>,
{
    let n = env.n_agents();
    let k = E::Action::count();
    let mut tables = vec![QTable::new(k, config.epsilon_start); n];
    let mut rng = derive_rng(config.seed, "train", 0);
    let mut returns = Vec::with_capacity(config.episodes as usize);
    let mut curve: Vec<IntervalRecord<Vec<QTable>>> = Vec::new();

    let eval_points: Vec<u64> = match schedule {
        Some(s) if s.intervals > 1 => (0..s.intervals)
            .map(|j| j as u64 * config.episodes / (s.intervals as u64 - 1))
            .collect(),
        Some(s) if s.intervals == 1 => vec![config.episodes],
        _ => Vec::new(),
    };
    let mut next_eval = 0;
    let mut best = f64::NEG_INFINITY;
    let mut run_eval = |episode: u64, tables: &[QTable], curve: &mut Vec<IntervalRecord<Vec<QTable>>>| {
        let s = schedule.expect("eval points imply a schedule");
        let policies = greedy_policies(tables);
        let tag = format!("eval-{}", curve.len());
        let rs = evaluate(env, &policies, s.episodes_per_interval, config.seed, &tag)?;
        let (mean, se) = mean_and_std_error(&rs);
        let mut record = IntervalRecord {
            index: curve.len(),
            episode,
            mean_return: mean,
            std_error: se,
            episodes: s.episodes_per_interval,
            snapshot: None,
        };
        let plain = IntervalRecord {
            index: record.index,
            episode,
            mean_return: mean,
            std_error: se,
            episodes: record.episodes,
            snapshot: None,
        };
        on_eval(&plain, &policies)?;
        if mean > best {
            best = mean;
            for r in curve.iter_mut() {
                r.snapshot = None;
            }
            record.snapshot = Some(
                tables
                    .iter()
                    .cloned()
                    .map(|mut t| {
                        t.epsilon = 0.0;
                        t
                    })
                    .collect(),
            );
        }
        curve.push(record);
        Ok::<(), Err>(())
    };

    for episode in 0..config.episodes {
        while next_eval < eval_points.len() && eval_points[next_eval] == episode {
            run_eval(episode, &tables, &mut curve)?;
            next_eval += 1;
        }
        let eps = config.epsilon_at(episode);
        for t in &mut tables {
            t.epsilon = eps;
        }
        let mut state = env.reset(derive_seed(config.seed, "train-reset", episode))?;
        let mut total = 0.0;
        let mut obs: Vec<u64> = (0..n).map(|i| env.observe(&state, AgentId(i)).hash64()).collect();
        while !env.is_done(&state) {
            let actions: Vec<usize> = (0..n).map(|i| epsilon_greedy(&tables[i], obs[i], &mut rng)).collect();
            let joint: Vec<E::Action> = actions
                .iter()
                .map(|&a| E::Action::from_index(a).expect("in range"))
                .collect();
            let out = env.step(&state, &joint)?;
            let r = out.team_reward;
            total += r;
            let next_obs: Vec<u64> = (0..n)
                .map(|i| env.observe(&out.next_state, AgentId(i)).hash64())
                .collect();
            for i in 0..n {
                let next = (!out.done).then_some(next_obs[i]);
                q_update(
                    &mut tables[i],
                    obs[i],
                    actions[i],
                    r,
                    next,
                    config.learning_rate,
                    config.discount,
                );
            }
            obs = next_obs;
            state = out.next_state;
        }
        returns.push(total);
    }
    while next_eval < eval_points.len() {
        run_eval(config.episodes, &tables, &mut curve)?;
        next_eval += 1;
    }

    for t in &mut tables {
        t.epsilon = 0.0;
    }
    Ok(TrainedIql {
        tables,
        episode_returns: returns,
        curve,
    })
}

/// Header of a saved policy file.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyHeader {
    pub kind: String,
    pub scenario: String,
    pub seed: u64,
}

/// Serialises Q-tables as `policy_v1`: a header followed by
/// `agent obs_hash action value` rows sorted by agent, hash and action.
pub fn write_policy(header: &PolicyHeader, tables: &[QTable]) -> String {
    let n_actions = tables.first().map_or(0, |t| t.n_actions);
    let mut out = String::new();
    let _ = writeln!(out, "{POLICY_SCHEMA}");
    let _ = writeln!(out, "kind = {}", header.kind);
    let _ = writeln!(out, "scenario = {}", header.scenario);
    let _ = writeln!(out, "seed = {}", header.seed);
    let _ = writeln!(out, "agents = {}", tables.len());
    let _ = writeln!(out, "actions = {n_actions}");
    for (agent, t) in tables.iter().enumerate() {
        let mut keys: Vec<&u64> = t.values.keys().collect();
        keys.sort();
        for key in keys {
            for (a, v) in t.values[key].iter().enumerate() {
                let _ = writeln!(out, "{agent} {key:016x} {a} {v:?}");
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("policy file line {line}: {message}")]
pub struct PolicyFormatError {
    pub line: usize,
    pub message: String,
}

pub fn read_policy(text: &str) -> Result<(PolicyHeader, Vec<QTable>), PolicyFormatError> {
    let err = |line: usize, m: &str| PolicyFormatError {
        line,
        message: m.to_string(),
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == POLICY_SCHEMA => {}
        _ => return Err(err(1, "missing policy_v1 schema line")),
    }
    let mut fields: HashMap<&str, &str> = HashMap::new();
    for key in ["kind", "scenario", "seed", "agents", "actions"] {
        let (no, l) = lines.next().ok_or_else(|| err(0, "truncated header"))?;
        let (k, v) = l.split_once(" = ").ok_or_else(|| err(no, "expected `key = value`"))?;
        if k != key {
            return Err(err(no, &format!("expected key {key}")));
        }
        fields.insert(key, v);
    }
    let seed = fields["seed"].parse().map_err(|_| err(4, "bad seed"))?;
    let agents: usize = fields["agents"].parse().map_err(|_| err(5, "bad agent count"))?;
    let actions: usize = fields["actions"].parse().map_err(|_| err(6, "bad action count"))?;
    let mut tables = vec![QTable::new(actions, 0.0); agents];
    for (no, l) in lines {
        if l.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = l.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(err(no, "expected `agent obs_hash action value`"));
        }
        let agent: usize = parts[0].parse().map_err(|_| err(no, "bad agent"))?;
        let key = u64::from_str_radix(parts[1], 16).map_err(|_| err(no, "bad obs hash"))?;
        let action: usize = parts[2].parse().map_err(|_| err(no, "bad action"))?;
        let value: f64 = parts[3].parse().map_err(|_| err(no, "bad value"))?;
        if agent >= agents || action >= actions {
            return Err(err(no, "agent or action out of range"));
        }
        if !value.is_finite() {
            return Err(err(no, "non-finite value"));
        }
        tables[agent].row_mut(key)[action] = value;
    }
    let header = PolicyHeader {
        kind: fields["kind"].to_string(),
        scenario: fields["scenario"].to_string(),
        seed,
    };
    Ok((header, tables))
}
