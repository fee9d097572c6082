//! Sparse-reward warehouse.
//!
//! Robots fetch requested shelves and carry them onto a goal cell. The only
//! reward is a delivery: `1 / n_requests` to the delivering robot. A delivered
//! shelf stops being requested and a replacement request is drawn from a
//! deterministic stream keyed by the episode seed and the delivery count, so
//! transitions stay pure.
//!
//! Simplified physics: no rotation. Unloaded robots may drive under shelves;
//! loaded robots may not enter a cell that holds another shelf.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Action, AgentId, EnvError, Environment, Observation, ParseError, Pos, StepOutcome};

pub const DEFAULT_MAX_STEPS: u32 = 500;

pub const CELL_OUT_OF_GRID: i32 = -1;
pub const CELL_AGENT: i32 = 1;
pub const CELL_SHELF: i32 = 2;
pub const CELL_REQUESTED: i32 = 4;
pub const CELL_GOAL: i32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WarehouseAction {
    NoOp,
    Up,
    Down,
    Left,
    Right,
    ToggleLoad,
}

impl Action for WarehouseAction {
    const ALL: &'static [Self] = &[
        WarehouseAction::NoOp,
        WarehouseAction::Up,
        WarehouseAction::Down,
        WarehouseAction::Left,
        WarehouseAction::Right,
        WarehouseAction::ToggleLoad,
    ];
    const NOOP: Self = WarehouseAction::NoOp;

    fn index(self) -> usize {
        self as usize
    }
}

impl WarehouseAction {
    fn delta(self) -> Option<(i32, i32)> {
        match self {
            WarehouseAction::Up => Some((0, -1)),
            WarehouseAction::Down => Some((0, 1)),
            WarehouseAction::Left => Some((-1, 0)),
            WarehouseAction::Right => Some((1, 0)),
            WarehouseAction::NoOp | WarehouseAction::ToggleLoad => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarehouseScenario {
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub n_agents: usize,
    pub n_requests: usize,
    pub shelf_cells: Vec<Pos>,
    pub goal_cells: Vec<Pos>,
    pub max_steps: u32,
}

impl WarehouseScenario {
    /// Standard layout: shelf blocks two cells wide separated by one-cell
    /// aisles in the upper part of the map, two goal cells centred on the
    /// bottom row.
    pub fn with_layout(width: u32, height: u32, n_agents: usize) -> Self {
        let (w, h) = (width as i32, height as i32);
        let mut shelf_cells = Vec::new();
        for y in 1..=(h - 4) {
            if y % 3 == 0 {
                continue;
            }
            for x in 1..=(w - 2) {
                if x % 3 != 0 {
                    shelf_cells.push(Pos::new(x, y));
                }
            }
        }
        let goal_cells = vec![Pos::new(w / 2 - 1, h - 1), Pos::new(w / 2, h - 1)];
        WarehouseScenario {
            name: format!("rware-{width}x{height}-{n_agents}ag"),
            width,
            height,
            n_agents,
            n_requests: n_agents,
            shelf_cells,
            goal_cells,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }

    pub fn n_shelves(&self) -> usize {
        self.shelf_cells.len()
    }

    pub fn with_requests(mut self, n_requests: usize) -> Self {
        self.n_requests = n_requests;
        self
    }

    pub fn with_max_steps(mut self, max_steps: u32) -> Self {
        self.max_steps = max_steps;
        self
    }

    /// `rware-<size>-<n>ag[-easy|-hard][-v<k>]` with size one of tiny (11x11),
    /// small (11x20), medium (16x20), large (16x29). Open requests default to
    /// the agent count; easy doubles it and hard halves it.
    pub fn parse(name: &str) -> Result<Self, ParseError> {
        let err = |offset: usize, message: &str| ParseError {
            name: name.to_string(),
            offset,
            message: message.to_string(),
        };
        let rest = name
            .strip_prefix("rware-")
            .ok_or_else(|| err(0, "expected \"rware-\""))?;
        let mut offset = "rware-".len();
        let (size, rest) = rest
            .split_once('-')
            .ok_or_else(|| err(offset, "expected \"<size>-\""))?;
        let (width, height) = match size {
            "tiny" => (11, 11),
            "small" => (11, 20),
            "medium" => (16, 20),
            "large" => (16, 29),
            _ => return Err(err(offset, "unknown size (expected tiny|small|medium|large)")),
        };
        offset += size.len() + 1;
        let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 {
            return Err(err(offset, "expected agent count"));
        }
        let n_agents: usize = rest[..digits]
            .parse()
            .map_err(|_| err(offset, "agent count out of range"))?;
        offset += digits;
        let rest = &rest[digits..];
        let rest = rest.strip_prefix("ag").ok_or_else(|| err(offset, "expected \"ag\""))?;
        offset += 2;
        let (factor, rest) = if let Some(r) = rest.strip_prefix("-easy") {
            offset += 5;
            (2.0, r)
        } else if let Some(r) = rest.strip_prefix("-hard") {
            offset += 5;
            (0.5, r)
        } else {
            (1.0, rest)
        };
        if let Some(v) = rest.strip_prefix("-v") {
            if v.is_empty() || !v.bytes().all(|b| b.is_ascii_digit()) {
                return Err(err(offset + 2, "expected version number"));
            }
        } else if !rest.is_empty() {
            return Err(err(offset, "unexpected trailing characters"));
        }
        if n_agents == 0 {
            return Err(err("rware-".len() + size.len() + 1, "agent count must be at least 1"));
        }
        let mut sc = WarehouseScenario::with_layout(width, height, n_agents);
        sc.n_requests = ((n_agents as f64 * factor) as usize).max(1);
        sc.name = name.to_string();
        Ok(sc)
    }

    fn validate(&self) -> Result<(), EnvError> {
        let in_grid = |p: &Pos| p.x >= 0 && p.y >= 0 && (p.x as u32) < self.width && (p.y as u32) < self.height;
        let bad = |m: String| Err(EnvError::InfeasibleScenario(m));
        if !self.goal_cells.iter().all(in_grid) || self.goal_cells.is_empty() {
            return bad("goal cells must be in the grid".into());
        }
        if !self.shelf_cells.iter().all(in_grid) || self.shelf_cells.iter().any(|p| self.goal_cells.contains(p)) {
            return bad("shelves must sit on in-grid, non-goal cells".into());
        }
        let cells = self.width as usize * self.height as usize;
        if self.n_agents == 0 || self.n_agents > cells {
            return bad(format!("{} agents do not fit on {} cells", self.n_agents, cells));
        }
        if self.n_requests == 0 || self.n_requests + self.n_agents > self.n_shelves() {
            return bad(format!(
                "{} requests with {} agents need more than {} shelves",
                self.n_requests,
                self.n_agents,
                self.n_shelves()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Robot {
    pub pos: Pos,
    pub carrying: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shelf {
    pub home: Pos,
    pub pos: Pos,
    pub requested: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarehouseState {
    pub agents: Vec<Robot>,
    pub shelves: Vec<Shelf>,
    pub request_queue: Vec<usize>,
    pub step: u32,
    pub max_steps: u32,
    pub deliveries: u64,
    pub episode_seed: u64,
}

impl WarehouseState {
    fn agent_at(&self, p: Pos) -> Option<usize> {
        self.agents.iter().position(|a| a.pos == p)
    }

    fn shelf_at(&self, p: Pos) -> Option<usize> {
        self.shelves.iter().position(|s| s.pos == p)
    }

    fn is_carried(&self, shelf: usize) -> bool {
        self.agents.iter().any(|a| a.carrying == Some(shelf))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WarehouseEnv {
    scenario: WarehouseScenario,
}

impl WarehouseEnv {
    pub fn new(scenario: WarehouseScenario) -> Self {
        WarehouseEnv { scenario }
    }

    pub fn parse(name: &str) -> Result<Self, ParseError> {
        WarehouseScenario::parse(name).map(Self::new)
    }

    pub fn scenario(&self) -> &WarehouseScenario {
        &self.scenario
    }

    fn in_grid(&self, p: Pos) -> bool {
        p.x >= 0 && p.y >= 0 && (p.x as u32) < self.scenario.width && (p.y as u32) < self.scenario.height
    }

    fn is_goal(&self, p: Pos) -> bool {
        self.scenario.goal_cells.contains(&p)
    }

    /// Next request after a delivery: one of the shelves that is neither
    /// requested nor being carried.
    fn draw_request(&self, state: &WarehouseState) -> Option<usize> {
        let candidates: Vec<usize> = (0..state.shelves.len())
            .filter(|&s| !state.shelves[s].requested && !state.is_carried(s))
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let key = state.episode_seed ^ state.deliveries.wrapping_mul(0xa076_1d64_78bd_642f);
        Some(candidates[(splitmix64(key) % candidates.len() as u64) as usize])
    }

    fn cell_code(&self, state: &WarehouseState, p: Pos) -> i32 {
        if !self.in_grid(p) {
            return CELL_OUT_OF_GRID;
        }
        let mut code = 0;
        if state.agent_at(p).is_some() {
            code |= CELL_AGENT;
        }
        if let Some(s) = state.shelf_at(p) {
            code |= CELL_SHELF;
            if state.shelves[s].requested {
                code |= CELL_REQUESTED;
            }
        }
        if self.is_goal(p) {
            code |= CELL_GOAL;
        }
        code
    }
}

impl Environment for WarehouseEnv {
    type State = WarehouseState;
    type Action = WarehouseAction;

    fn name(&self) -> String {
        self.scenario.name.clone()
    }

    fn n_agents(&self) -> usize {
        self.scenario.n_agents
    }

    fn reset(&self, seed: u64) -> Result<WarehouseState, EnvError> {
        let sc = &self.scenario;
        sc.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = sc.width as usize * sc.height as usize;
        let agents = sample(&mut rng, cells, sc.n_agents)
            .into_iter()
            .map(|c| Robot {
                pos: Pos::new((c % sc.width as usize) as i32, (c / sc.width as usize) as i32),
                carrying: None,
            })
            .collect();
        let mut shelves: Vec<Shelf> = sc
            .shelf_cells
            .iter()
            .map(|&p| Shelf {
                home: p,
                pos: p,
                requested: false,
            })
            .collect();
        let mut request_queue = sample(&mut rng, shelves.len(), sc.n_requests).into_vec();
        request_queue.sort_unstable();
        for &s in &request_queue {
            shelves[s].requested = true;
        }
        Ok(WarehouseState {
            agents,
            shelves,
            request_queue,
            step: 0,
            max_steps: sc.max_steps,
            deliveries: 0,
            episode_seed: seed,
        })
    }

    fn transition(&self, state: &WarehouseState, joint: &[WarehouseAction]) -> StepOutcome<WarehouseState> {
        let mut next = state.clone();
        next.step += 1;

        for (i, action) in joint.iter().enumerate() {
            let Some((dx, dy)) = action.delta() else { continue };
            let target = next.agents[i].pos.offset(dx, dy);
            if !self.in_grid(target) || next.agent_at(target).is_some() {
                continue;
            }
            let carrying = next.agents[i].carrying;
            if carrying.is_some() && next.shelf_at(target).is_some() {
                continue;
            }
            next.agents[i].pos = target;
            if let Some(s) = carrying {
                next.shelves[s].pos = target;
            }
        }

        for (i, action) in joint.iter().enumerate() {
            if *action != WarehouseAction::ToggleLoad {
                continue;
            }
            let robot = &next.agents[i];
            match robot.carrying {
                Some(_) => next.agents[i].carrying = None,
                None => {
                    if let Some(s) = next.shelf_at(robot.pos) {
                        next.agents[i].carrying = Some(s);
                    }
                }
            }
        }

        let mut rewards = vec![0.0; joint.len()];
        let per_delivery = 1.0 / self.scenario.n_requests as f64;
        for (i, reward) in rewards.iter_mut().enumerate() {
            let Some(s) = next.agents[i].carrying else { continue };
            if !next.shelves[s].requested || !self.is_goal(next.agents[i].pos) {
                continue;
            }
            *reward += per_delivery;
            next.shelves[s].requested = false;
            next.request_queue.retain(|&q| q != s);
            next.deliveries += 1;
            if let Some(new) = self.draw_request(&next) {
                next.shelves[new].requested = true;
                next.request_queue.push(new);
            }
        }

        let team_reward = rewards.iter().sum();
        let done = next.step >= next.max_steps;
        StepOutcome {
            next_state: next,
            team_reward,
            individual_rewards: rewards,
            done,
        }
    }

    fn is_done(&self, state: &WarehouseState) -> bool {
        state.step >= state.max_steps
    }

    fn step_count(&self, state: &WarehouseState) -> u32 {
        state.step
    }

    /// `[x, y, carrying, 3x3 cells...]`; carrying is 0 (nothing), 1 (shelf)
    /// or 2 (requested shelf). Cells are bit sets of the `CELL_*` flags.
    fn observe(&self, state: &WarehouseState, agent: AgentId) -> Observation {
        let me = &state.agents[agent.0];
        let carrying = match me.carrying {
            None => 0,
            Some(s) if state.shelves[s].requested => 2,
            Some(_) => 1,
        };
        let mut out = vec![me.pos.x, me.pos.y, carrying];
        for dy in -1..=1 {
            for dx in -1..=1 {
                out.push(self.cell_code(state, me.pos.offset(dx, dy)));
            }
        }
        Observation(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use WarehouseAction::*;

    fn carrying_next_to_goal(requested: bool) -> (WarehouseEnv, WarehouseState) {
        let env = WarehouseEnv::new(WarehouseScenario::with_layout(11, 11, 4));
        let mut s = env.reset(5).unwrap();
        let goal = env.scenario().goal_cells[0];
        let shelf = (0..s.shelves.len())
            .find(|&i| s.shelves[i].requested == requested)
            .unwrap();
        // Park everyone along the left column, then put agent 0 above the goal
        // holding the chosen shelf.
        for (i, a) in s.agents.iter_mut().enumerate() {
            a.pos = Pos::new(0, i as i32);
        }
        s.agents[0].pos = goal.offset(0, -1);
        s.agents[0].carrying = Some(shelf);
        s.shelves[shelf].pos = goal.offset(0, -1);
        (env, s)
    }

    #[test]
    fn parses_sizes() {
        let s = WarehouseScenario::parse("rware-tiny-2ag").unwrap();
        assert_eq!((s.width, s.height, s.n_agents, s.n_requests), (11, 11, 2, 2));
        let s = WarehouseScenario::parse("rware-small-4ag").unwrap();
        assert_eq!((s.width, s.height, s.n_agents), (11, 20, 4));
        assert!(WarehouseScenario::parse("rware-tiny-4ag-v1").is_ok());
        let e = WarehouseScenario::parse("rware-giant-3ag").unwrap_err();
        assert_eq!(e.offset, 6);
        assert!(WarehouseScenario::parse("rware-tiny-2").is_err());
        assert_eq!(WarehouseScenario::parse("rware-tiny-2ag-hard").unwrap().n_requests, 1);
        assert_eq!(
            WarehouseScenario::parse("rware-small-4ag-easy-v1").unwrap().n_requests,
            8
        );
        assert!(WarehouseScenario::parse("rware-tiny-2ag-medium").is_err());
    }

    #[test]
    fn requested_delivery_pays() {
        let (env, s) = carrying_next_to_goal(true);
        let out = env.step(&s, &[Down, NoOp, NoOp, NoOp]).unwrap();
        assert_eq!(out.individual_rewards[0], 0.25);
        assert_eq!(out.team_reward, 0.25);
        let n = &out.next_state;
        assert_eq!(n.deliveries, 1);
        assert_eq!(n.request_queue.len(), 4);
        assert_eq!(n.shelves.iter().filter(|s| s.requested).count(), 4);
        // Replacement request is a function of the state alone.
        assert_eq!(out, env.step(&s, &[Down, NoOp, NoOp, NoOp]).unwrap());
    }

    #[test]
    fn unrequested_delivery_pays_nothing() {
        let (env, s) = carrying_next_to_goal(false);
        let out = env.step(&s, &[Down, NoOp, NoOp, NoOp]).unwrap();
        assert_eq!(out.team_reward, 0.0);
    }

    #[test]
    fn loaded_robot_blocked_by_shelf() {
        let env = WarehouseEnv::new(WarehouseScenario::with_layout(11, 11, 1).with_requests(1));
        let mut s = env.reset(0).unwrap();
        // (1,1) and (2,1) are both shelf homes.
        s.agents[0].pos = Pos::new(1, 1);
        let out = env.step(&s, &[ToggleLoad]).unwrap();
        assert!(out.next_state.agents[0].carrying.is_some());
        let out = env.step(&out.next_state, &[Right]).unwrap();
        assert_eq!(out.next_state.agents[0].pos, Pos::new(1, 1));
        // Unloaded it can drive under shelves.
        let out = env.step(&s, &[Right]).unwrap();
        assert_eq!(out.next_state.agents[0].pos, Pos::new(2, 1));
    }

    #[test]
    fn idle_episode_returns_zero() {
        let env = WarehouseEnv::parse("rware-tiny-2ag").unwrap();
        let mut s = env.reset(1).unwrap();
        let mut total = 0.0;
        while !env.is_done(&s) {
            let out = env.step(&s, &[NoOp, NoOp]).unwrap();
            total += out.team_reward;
            s = out.next_state;
        }
        assert_eq!(total, 0.0);
        assert_eq!(s.step, DEFAULT_MAX_STEPS);
    }

    #[test]
    fn observation_is_three_by_three() {
        let env = WarehouseEnv::parse("rware-tiny-2ag").unwrap();
        let s = env.reset(2).unwrap();
        assert_eq!(env.observe(&s, AgentId(0)).0.len(), 12);
    }
}
