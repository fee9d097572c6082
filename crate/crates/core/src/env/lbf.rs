//! Level-Based Foraging.
//!
//! Leveled agents walk a grid and consume leveled food. A food item is consumed
//! when the agents adjacent to it that choose `Load` have a combined level of
//! at least the food level. Rewards are split among the consuming agents in
//! proportion to their levels and normalised by the total food level spawned,
//! so an episode return lies in `[0, 1]`.
//!
//! Scenario names follow `Foraging[-<s>s]-<x>x<y>-<n>p-<f>f[-coop][-det[-max-food-sum]][-v<k>]`.
//! `-det` pins agent levels to `1, 2, ..., n` and every food level to 3;
//! `-det-max-food-sum` pins agent levels the same way and draws food levels
//! uniformly from `1..=6`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Action, AgentId, EnvError, Environment, Observation, ParseError, Pos, StepOutcome};

/// Observation cell code for cells outside the grid.
pub const CELL_OUT_OF_GRID: i32 = -1;
pub const CELL_EMPTY: i32 = 0;
/// Agent cells encode `CELL_AGENT_BASE + level`.
pub const CELL_AGENT_BASE: i32 = 100;
/// Food cells encode `CELL_FOOD_BASE + level`.
pub const CELL_FOOD_BASE: i32 = 200;
/// Number of leading header entries in an [`Observation`] before the cell grid:
/// own level, own x, own y, window width, window height.
pub const OBS_HEADER_LEN: usize = 5;

pub const DEFAULT_MAX_STEPS: u32 = 50;

/// Scalability family: 2, 4, 10, 20 and 50 agents.
pub const SCALABILITY_PRESETS: [&str; 5] = [
    "Foraging-5x5-2p-2f",
    "Foraging-10x10-4p-4f",
    "Foraging-15x15-10p-10f",
    "Foraging-20x20-20p-20f",
    "Foraging-25x25-50p-50f",
];

/// Reliability family: three agents with levels 1, 2 and 3.
pub const RELIABILITY_PRESETS: [&str; 2] = ["Foraging-15x15-3p-3f-det", "Foraging-15x15-3p-3f-det-max-food-sum"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LbfAction {
    NoOp,
    Up,
    Down,
    Left,
    Right,
    Load,
}

impl Action for LbfAction {
    const ALL: &'static [Self] = &[
        LbfAction::NoOp,
        LbfAction::Up,
        LbfAction::Down,
        LbfAction::Left,
        LbfAction::Right,
        LbfAction::Load,
    ];
    const NOOP: Self = LbfAction::NoOp;

    fn index(self) -> usize {
        self as usize
    }
}

impl LbfAction {
    fn delta(self) -> Option<(i32, i32)> {
        match self {
            LbfAction::Up => Some((0, -1)),
            LbfAction::Down => Some((0, 1)),
            LbfAction::Left => Some((-1, 0)),
            LbfAction::Right => Some((1, 0)),
            LbfAction::NoOp | LbfAction::Load => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LevelMode {
    /// Uniform over `1..=3`.
    Random,
    FixedLevels(Vec<u32>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FoodLevelMode {
    /// Uniform over `1..=sum of agent levels`.
    RandomUpToSum,
    Fixed(u32),
    /// Uniform over `lo..=hi`.
    RandomRange(u32, u32),
}

/// How a consumed food item's value is divided among the agents that loaded it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardRule {
    /// Share proportional to the agent's level.
    Proportional,
    /// `food_level / agent_level` for every loader (shares do not sum to the
    /// food level).
    PaperLiteral,
}

impl std::str::FromStr for RewardRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "proportional" => Ok(RewardRule::Proportional),
            "paper_literal" | "paper-literal" => Ok(RewardRule::PaperLiteral),
            other => Err(format!(
                "unknown reward rule {other:?} (expected proportional|paper_literal)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LbfScenario {
    pub name: String,
    /// Observation radius; `None` means the whole grid is visible.
    pub sight: Option<u32>,
    pub width: u32,
    pub height: u32,
    pub n_agents: usize,
    pub n_food: usize,
    pub coop: bool,
    pub level_mode: LevelMode,
    pub food_level_mode: FoodLevelMode,
    pub max_steps: u32,
    pub reward_rule: RewardRule,
}

impl LbfScenario {
    pub fn new(width: u32, height: u32, n_agents: usize, n_food: usize) -> Self {
        LbfScenario {
            name: format!("Foraging-{width}x{height}-{n_agents}p-{n_food}f"),
            sight: None,
            width,
            height,
            n_agents,
            n_food,
            coop: false,
            level_mode: LevelMode::Random,
            food_level_mode: FoodLevelMode::RandomUpToSum,
            max_steps: DEFAULT_MAX_STEPS,
            reward_rule: RewardRule::Proportional,
        }
    }

    pub fn with_levels(mut self, levels: Vec<u32>) -> Self {
        self.level_mode = LevelMode::FixedLevels(levels);
        self
    }

    pub fn with_food_levels(mut self, mode: FoodLevelMode) -> Self {
        self.food_level_mode = mode;
        self
    }

    pub fn with_sight(mut self, sight: Option<u32>) -> Self {
        self.sight = sight;
        self
    }

    pub fn with_max_steps(mut self, max_steps: u32) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn with_reward_rule(mut self, rule: RewardRule) -> Self {
        self.reward_rule = rule;
        self
    }

    pub fn with_coop(mut self, coop: bool) -> Self {
        self.coop = coop;
        self
    }

    pub fn parse(name: &str) -> Result<Self, ParseError> {
        Parser::new(name).scenario()
    }

    fn validate(&self) -> Result<(), EnvError> {
        let infeasible = |m: String| Err(EnvError::InfeasibleScenario(m));
        if self.width < 2 || self.height < 2 {
            return infeasible(format!("grid {}x{} smaller than 2x2", self.width, self.height));
        }
        if self.n_agents == 0 || self.n_food == 0 {
            return infeasible("need at least one agent and one food".into());
        }
        let cells = self.width as usize * self.height as usize;
        if self.n_agents + self.n_food > cells {
            return infeasible(format!(
                "{} agents and {} food do not fit on {} cells",
                self.n_agents, self.n_food, cells
            ));
        }
        if let LevelMode::FixedLevels(levels) = &self.level_mode {
            if levels.len() != self.n_agents {
                return infeasible(format!("{} fixed levels for {} agents", levels.len(), self.n_agents));
            }
            if levels.contains(&0) {
                return infeasible("agent levels must be at least 1".into());
            }
        }
        match self.food_level_mode {
            FoodLevelMode::Fixed(0) => infeasible("food level must be at least 1".into()),
            FoodLevelMode::RandomRange(lo, hi) if lo == 0 || lo > hi => {
                infeasible(format!("bad food level range {lo}..={hi}"))
            }
            _ => Ok(()),
        }
    }
}

struct Parser<'a> {
    name: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(name: &'a str) -> Self {
        Parser { name, pos: 0 }
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            name: self.name.to_string(),
            offset: self.pos,
            message: message.into(),
        })
    }

    fn rest(&self) -> &'a str {
        &self.name[self.pos..]
    }

    fn eat(&mut self, lit: &str) -> bool {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, lit: &str) -> Result<(), ParseError> {
        if self.eat(lit) {
            Ok(())
        } else {
            self.err(format!("expected {lit:?}"))
        }
    }

    fn number(&mut self) -> Result<u32, ParseError> {
        let digits = self.rest().bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 {
            return self.err("expected a number");
        }
        let value = self.rest()[..digits].parse::<u32>();
        match value {
            Ok(v) => {
                self.pos += digits;
                Ok(v)
            }
            Err(_) => self.err("number out of range"),
        }
    }

    /// Number followed by a unit letter, e.g. `2s` or `4p`.
    fn tagged(&mut self, unit: &str) -> Result<u32, ParseError> {
        let v = self.number()?;
        self.expect(unit)?;
        Ok(v)
    }

    fn scenario(mut self) -> Result<LbfScenario, ParseError> {
        self.expect("Foraging")?;
        self.expect("-")?;

        // Optional `<s>s-` sight field: digits followed by 's'.
        let digits = self.rest().bytes().take_while(u8::is_ascii_digit).count();
        let sight = if self.rest()[digits..].starts_with('s') {
            let s = self.tagged("s")?;
            self.expect("-")?;
            Some(s)
        } else {
            None
        };

        let width = self.tagged("x")?;
        let height = self.number()?;
        self.expect("-")?;
        let n_agents = self.tagged("p")?;
        self.expect("-")?;
        let n_food = self.tagged("f")?;

        let mut scenario = LbfScenario::new(width, height, n_agents as usize, n_food as usize).with_sight(sight);
        scenario.name = self.name.to_string();

        if self.eat("-coop") {
            scenario.coop = true;
        }
        if self.eat("-det") {
            let levels = (1..=n_agents).collect();
            scenario.level_mode = LevelMode::FixedLevels(levels);
            if self.eat("-max-food-sum") {
                scenario.food_level_mode = FoodLevelMode::RandomRange(1, 6);
            } else {
                scenario.food_level_mode = FoodLevelMode::Fixed(3);
            }
        }
        if self.eat("-v") {
            self.number()?;
        }
        if !self.rest().is_empty() {
            return self.err("unexpected trailing characters");
        }
        if width < 2 || height < 2 {
            self.pos = 0;
            return self.err("grid dimensions must be at least 2");
        }
        if n_agents == 0 || n_food == 0 {
            self.pos = 0;
            return self.err("agent and food counts must be at least 1");
        }
        Ok(scenario)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LbfAgent {
    pub pos: Pos,
    pub level: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Food {
    pub pos: Pos,
    pub level: u32,
    pub present: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LbfState {
    pub agents: Vec<LbfAgent>,
    pub foods: Vec<Food>,
    pub step: u32,
    pub max_steps: u32,
    pub total_food_level_at_spawn: u32,
    pub episode_seed: u64,
}

impl LbfState {
    pub fn agent_at(&self, p: Pos) -> Option<usize> {
        self.agents.iter().position(|a| a.pos == p)
    }

    pub fn food_at(&self, p: Pos) -> Option<usize> {
        self.foods.iter().position(|f| f.present && f.pos == p)
    }

    pub fn present_food(&self) -> usize {
        self.foods.iter().filter(|f| f.present).count()
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.max_steps || self.present_food() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LbfEnv {
    scenario: LbfScenario,
}

impl LbfEnv {
    pub fn new(scenario: LbfScenario) -> Self {
        LbfEnv { scenario }
    }

    pub fn parse(name: &str) -> Result<Self, ParseError> {
        LbfScenario::parse(name).map(Self::new)
    }

    pub fn scenario(&self) -> &LbfScenario {
        &self.scenario
    }

    fn in_grid(&self, p: Pos) -> bool {
        p.x >= 0 && p.y >= 0 && (p.x as u32) < self.scenario.width && (p.y as u32) < self.scenario.height
    }

    fn cell_code(&self, state: &LbfState, p: Pos) -> i32 {
        if !self.in_grid(p) {
            CELL_OUT_OF_GRID
        } else if let Some(a) = state.agent_at(p) {
            CELL_AGENT_BASE + state.agents[a].level as i32
        } else if let Some(f) = state.food_at(p) {
            CELL_FOOD_BASE + state.foods[f].level as i32
        } else {
            CELL_EMPTY
        }
    }

    /// Reward for each loader of a consumed food item.
    fn shares(&self, food_level: u32, loaders: &[(usize, u32)], total: u32) -> Vec<(usize, f64)> {
        let total = f64::from(total);
        match self.scenario.reward_rule {
            RewardRule::Proportional => {
                let sum: u64 = loaders.iter().map(|&(_, l)| u64::from(l)).sum();
                loaders
                    .iter()
                    .map(|&(i, l)| {
                        let num = u64::from(l) * u64::from(food_level);
                        (i, num as f64 / (sum as f64 * total))
                    })
                    .collect()
            }
            RewardRule::PaperLiteral => loaders
                .iter()
                .map(|&(i, l)| (i, f64::from(food_level) / f64::from(l) / total))
                .collect(),
        }
    }
}

impl Environment for LbfEnv {
    type State = LbfState;
    type Action = LbfAction;

    fn name(&self) -> String {
        self.scenario.name.clone()
    }

    fn n_agents(&self) -> usize {
        self.scenario.n_agents
    }

    fn reset(&self, seed: u64) -> Result<LbfState, EnvError> {
        let sc = &self.scenario;
        sc.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let levels: Vec<u32> = match &sc.level_mode {
            LevelMode::Random => (0..sc.n_agents).map(|_| rng.gen_range(1..=3)).collect(),
            LevelMode::FixedLevels(l) => l.clone(),
        };
        let level_sum: u32 = levels.iter().sum();

        let cells = sc.width as usize * sc.height as usize;
        let picked = sample(&mut rng, cells, sc.n_agents + sc.n_food).into_vec();
        let to_pos = |c: usize| Pos::new((c % sc.width as usize) as i32, (c / sc.width as usize) as i32);

        let agents = picked[..sc.n_agents]
            .iter()
            .zip(&levels)
            .map(|(&c, &level)| LbfAgent { pos: to_pos(c), level })
            .collect();

        let foods: Vec<Food> = picked[sc.n_agents..]
            .iter()
            .map(|&c| {
                let level = if sc.coop {
                    level_sum
                } else {
                    match sc.food_level_mode {
                        FoodLevelMode::RandomUpToSum => rng.gen_range(1..=level_sum),
                        FoodLevelMode::Fixed(v) => v,
                        FoodLevelMode::RandomRange(lo, hi) => rng.gen_range(lo..=hi),
                    }
                };
                Food {
                    pos: to_pos(c),
                    level,
                    present: true,
                }
            })
            .collect();

        let total = foods.iter().map(|f| f.level).sum();
        Ok(LbfState {
            agents,
            foods,
            step: 0,
            max_steps: sc.max_steps,
            total_food_level_at_spawn: total,
            episode_seed: seed,
        })
    }

    fn transition(&self, state: &LbfState, joint: &[LbfAction]) -> StepOutcome<LbfState> {
        let mut next = state.clone();
        next.step += 1;

        // Movement, ascending agent index; blocked moves leave the agent in place.
        for (i, action) in joint.iter().enumerate() {
            if let Some((dx, dy)) = action.delta() {
                let target = next.agents[i].pos.offset(dx, dy);
                if self.in_grid(target) && next.agent_at(target).is_none() && next.food_at(target).is_none() {
                    next.agents[i].pos = target;
                }
            }
        }

        // Loading, ascending food index.
        let mut rewards = vec![0.0; joint.len()];
        for f in 0..next.foods.len() {
            let food = &next.foods[f];
            if !food.present {
                continue;
            }
            let loaders: Vec<(usize, u32)> = next
                .agents
                .iter()
                .enumerate()
                .filter(|&(i, a)| joint[i] == LbfAction::Load && a.pos.manhattan(food.pos) == 1)
                .map(|(i, a)| (i, a.level))
                .collect();
            let combined: u32 = loaders.iter().map(|&(_, l)| l).sum();
            if loaders.is_empty() || combined < food.level {
                continue;
            }
            for (i, r) in self.shares(food.level, &loaders, next.total_food_level_at_spawn) {
                rewards[i] += r;
            }
            next.foods[f].present = false;
        }

        let team_reward = rewards.iter().sum();
        let done = next.is_done();
        StepOutcome {
            next_state: next,
            team_reward,
            individual_rewards: rewards,
            done,
        }
    }

    fn is_done(&self, state: &LbfState) -> bool {
        state.is_done()
    }

    fn step_count(&self, state: &LbfState) -> u32 {
        state.step
    }

    /// `[own level, own x, own y, window width, window height, cells...]`, cells
    /// in row-major order. Under partial observability the window is
    /// `(2s+1)x(2s+1)` and "own position" is the window centre.
    fn observe(&self, state: &LbfState, agent: AgentId) -> Observation {
        let me = &state.agents[agent.0];
        let mut out = Vec::with_capacity(OBS_HEADER_LEN + 64);
        match self.scenario.sight {
            Some(s) => {
                let s = s as i32;
                let side = 2 * s + 1;
                out.extend([me.level as i32, s, s, side, side]);
                for dy in -s..=s {
                    for dx in -s..=s {
                        out.push(self.cell_code(state, me.pos.offset(dx, dy)));
                    }
                }
            }
            None => {
                let (w, h) = (self.scenario.width as i32, self.scenario.height as i32);
                out.extend([me.level as i32, me.pos.x, me.pos.y, w, h]);
                for y in 0..h {
                    for x in 0..w {
                        out.push(self.cell_code(state, Pos::new(x, y)));
                    }
                }
            }
        }
        Observation(out)
    }
}
