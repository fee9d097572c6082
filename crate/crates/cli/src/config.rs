//! Run configuration: defaults, an optional TOML file, then command-line flags.
//!
//! File keys and flag names are the same (`mc_samples` in the file is
//! `--mc-samples` on the command line). Top-level keys cover the scenario and
//! run shape; the `[attribute]`, `[train]`, `[bench]` and `[report]` sections
//! hold the per-command knobs.

use std::path::{Path, PathBuf};

use clap::Args;
use marl_credit::attribution::{Method, RemovalProxy, Sampler, DEFAULT_SHAPLEY_CAP, MAX_EXACT_AGENTS};
use marl_credit::bench::BenchMethod;
use marl_credit::env::lbf::{RewardRule, SCALABILITY_PRESETS};
use marl_credit::evaluation::DEFAULT_BOOTSTRAP_RESAMPLES;
use marl_credit::policy::TrainConfig;
use marl_credit::seed::derive_seed;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct GlobalOpts {
    /// Scenario name, e.g. Foraging-8x8-2p-2f or rware-tiny-2ag
    #[arg(long, global = true)]
    pub scenario: Option<String>,
    /// Policy: random, idle, greedy, iql, or a policy_v1 file path
    #[arg(long, global = true)]
    pub policy: Option<String>,
    /// Root seed; every random stream is derived from it
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Explicit run seeds (comma separated); overrides --runs
    #[arg(long, global = true, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Number of independent runs, seeded from the root seed
    #[arg(long, global = true)]
    pub runs: Option<usize>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Episodes per evaluation interval (simulate: total episodes)
    #[arg(long, global = true)]
    pub episodes: Option<usize>,
    /// Evaluation intervals
    #[arg(long, global = true)]
    pub intervals: Option<usize>,
    /// Attribution methods: importance, shapley, mc-shapley (comma separated)
    #[arg(long, global = true, value_delimiter = ',')]
    pub method: Option<Vec<String>>,
    /// Removal proxy: noop, random or copy
    #[arg(long, global = true)]
    pub proxy: Option<String>,
    /// Foraging reward rule: proportional or paper_literal
    #[arg(long, global = true)]
    pub reward_rule: Option<String>,
    /// Override the scenario's episode step cap
    #[arg(long, global = true)]
    pub max_steps: Option<u32>,
    /// Values closer than this share a rank
    #[arg(long, global = true)]
    pub tie_epsilon: Option<f64>,
    /// Worker threads for independent runs
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct AttributeOpts {
    /// Monte-Carlo coalition sampler: permutation or uniform
    #[arg(long)]
    pub sampler: Option<String>,
    /// Monte-Carlo samples per agent per step
    #[arg(long)]
    pub mc_samples: Option<usize>,
    /// Largest team for exact Shapley
    #[arg(long)]
    pub shapley_cap: Option<usize>,
    /// Evaluate coalitions on the rayon pool
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub parallel: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct TrainOpts {
    /// Training episodes per run
    #[arg(long)]
    pub train_episodes: Option<u64>,
    /// Q-learning step size
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Discount factor
    #[arg(long)]
    pub discount: Option<f64>,
    /// Exploration rate at the start of training
    #[arg(long)]
    pub epsilon_start: Option<f64>,
    /// Exploration rate after annealing
    #[arg(long)]
    pub epsilon_end: Option<f64>,
    /// Episodes over which exploration anneals linearly
    #[arg(long)]
    pub anneal_episodes: Option<u64>,
    /// Label written to scores.csv
    #[arg(long)]
    pub algorithm: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct BenchOpts {
    /// Scenarios to time (comma separated)
    #[arg(long, value_delimiter = ',')]
    pub bench_scenarios: Option<Vec<String>>,
    /// Methods to time: baseline, importance, shapley, mc-shapley
    #[arg(long, value_delimiter = ',')]
    pub bench_methods: Option<Vec<String>>,
    /// Timed repetitions per configuration
    #[arg(long)]
    pub reps: Option<usize>,
    /// Attributed steps per repetition
    #[arg(long)]
    pub steps_per_rep: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct ReportOpts {
    /// Input CSV files or directories (comma separated); defaults to --out
    #[arg(long, value_delimiter = ',')]
    pub input: Option<Vec<PathBuf>>,
    /// Bootstrap resamples for confidence intervals
    #[arg(long)]
    pub bootstrap_resamples: Option<usize>,
    /// Performance-profile thresholds (comma separated)
    #[arg(long, value_delimiter = ',')]
    pub taus: Option<Vec<f64>>,
}

/// Everything a configuration file or the command line may set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub global: GlobalOpts,
    pub attribute: AttributeOpts,
    pub train: TrainOpts,
    pub bench: BenchOpts,
    pub report: ReportOpts,
}

macro_rules! overlay {
    ($dst:expr, $src:expr, $($field:ident),+) => {
        $(if $src.$field.is_some() { $dst.$field = $src.$field.clone(); })+
    };
}

impl Overrides {
    /// Fields set in `other` win.
    pub fn merge(mut self, other: &Overrides) -> Self {
        let (g, o) = (&mut self.global, &other.global);
        overlay!(
            g,
            o,
            scenario,
            policy,
            seed,
            seeds,
            runs,
            out,
            episodes,
            intervals,
            method,
            proxy,
            reward_rule,
            max_steps,
            tie_epsilon,
            jobs
        );
        let (a, o) = (&mut self.attribute, &other.attribute);
        overlay!(a, o, sampler, mc_samples, shapley_cap, parallel);
        let (t, o) = (&mut self.train, &other.train);
        overlay!(
            t,
            o,
            train_episodes,
            learning_rate,
            discount,
            epsilon_start,
            epsilon_end,
            anneal_episodes,
            algorithm
        );
        let (b, o) = (&mut self.bench, &other.bench);
        overlay!(b, o, bench_scenarios, bench_methods, reps, steps_per_rep);
        let (r, o) = (&mut self.report, &other.report);
        overlay!(r, o, input, bootstrap_resamples, taus);
        self
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e| CliError::Config(format!("{e}")))?;
        fn section<T: for<'de> Deserialize<'de> + Default>(table: &mut toml::Table, name: &str) -> Result<T, CliError> {
            match table.remove(name) {
                None => Ok(T::default()),
                Some(v) => v.try_into().map_err(|e| CliError::Config(format!("[{name}]: {e}"))),
            }
        }
        let attribute = section(&mut table, "attribute")?;
        let train = section(&mut table, "train")?;
        let bench = section(&mut table, "bench")?;
        let report = section(&mut table, "report")?;
        let global = toml::Value::Table(table)
            .try_into()
            .map_err(|e| CliError::Config(format!("{e}")))?;
        Ok(Overrides {
            global,
            attribute,
            train,
            bench,
            report,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub scenario: String,
    pub policy: String,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub episodes: usize,
    pub intervals: usize,
    pub methods: Vec<Method>,
    pub proxy: RemovalProxy,
    pub reward_rule: RewardRule,
    pub max_steps: Option<u32>,
    pub tie_epsilon: f64,
    pub jobs: usize,
    pub sampler: Sampler,
    pub mc_samples: usize,
    pub shapley_cap: usize,
    pub parallel: bool,
    pub train: TrainConfig,
    pub algorithm: String,
    pub bench_scenarios: Vec<String>,
    pub bench_methods: Vec<BenchMethod>,
    pub reps: usize,
    pub steps_per_rep: usize,
    pub inputs: Vec<PathBuf>,
    pub bootstrap_resamples: usize,
    pub taus: Vec<f64>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            scenario: "Foraging-8x8-2p-2f".into(),
            policy: "random".into(),
            seed: 0,
            seeds: vec![0],
            out: PathBuf::from("out"),
            episodes: 32,
            intervals: 201,
            methods: vec![Method::Importance],
            proxy: RemovalProxy::NoOp,
            reward_rule: RewardRule::Proportional,
            max_steps: None,
            tie_epsilon: 1e-9,
            jobs: std::thread::available_parallelism().map_or(1, |n| n.get()),
            sampler: Sampler::Permutation,
            mc_samples: 100,
            shapley_cap: DEFAULT_SHAPLEY_CAP,
            parallel: false,
            train: TrainConfig::default(),
            algorithm: "iql".into(),
            bench_scenarios: SCALABILITY_PRESETS.iter().map(|s| s.to_string()).collect(),
            bench_methods: vec![BenchMethod::IMPORTANCE, BenchMethod::EXACT_SHAPLEY],
            reps: 3,
            steps_per_rep: 10,
            inputs: Vec::new(),
            bootstrap_resamples: DEFAULT_BOOTSTRAP_RESAMPLES,
            taus: (0..=20).map(|k| k as f64 / 20.0).collect(),
        }
    }
}

fn parse_with<T: std::str::FromStr<Err = String>>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|e| CliError::Config(format!("{key}: {e}")))
}

impl Config {
    /// Applies `o` on top of the defaults and checks ranges.
    pub fn resolve(o: &Overrides) -> Result<Self, CliError> {
        let mut c = Config::default();
        let g = &o.global;
        if let Some(v) = &g.scenario {
            c.scenario = v.clone();
        }
        if let Some(v) = &g.policy {
            c.policy = v.clone();
        }
        if let Some(v) = g.seed {
            c.seed = v;
        }
        c.seeds = match (&g.seeds, g.runs) {
            (Some(s), _) => s.clone(),
            (None, Some(runs)) => (0..runs as u64).map(|r| derive_seed(c.seed, "run", r)).collect(),
            (None, None) => vec![c.seed],
        };
        if let Some(v) = &g.out {
            c.out = v.clone();
        }
        if let Some(v) = g.episodes {
            c.episodes = v;
        }
        if let Some(v) = g.intervals {
            c.intervals = v;
        }
        if let Some(v) = &g.method {
            c.methods = v.iter().map(|m| parse_with("method", m)).collect::<Result<_, _>>()?;
        }
        if let Some(v) = &g.proxy {
            c.proxy = parse_with("proxy", v)?;
        }
        if let Some(v) = &g.reward_rule {
            c.reward_rule = parse_with("reward_rule", v)?;
        }
        c.max_steps = g.max_steps;
        if let Some(v) = g.tie_epsilon {
            c.tie_epsilon = v;
        }
        if let Some(v) = g.jobs {
            c.jobs = v;
        }

        let a = &o.attribute;
        if let Some(v) = &a.sampler {
            c.sampler = parse_with("sampler", v)?;
        }
        if let Some(v) = a.mc_samples {
            c.mc_samples = v;
        }
        if let Some(v) = a.shapley_cap {
            c.shapley_cap = v;
        }
        if let Some(v) = a.parallel {
            c.parallel = v;
        }

        let t = &o.train;
        if let Some(v) = t.train_episodes {
            c.train.episodes = v;
            if t.anneal_episodes.is_none() {
                c.train.anneal_episodes = v / 2;
            }
        }
        if let Some(v) = t.learning_rate {
            c.train.learning_rate = v;
        }
        if let Some(v) = t.discount {
            c.train.discount = v;
        }
        if let Some(v) = t.epsilon_start {
            c.train.epsilon_start = v;
        }
        if let Some(v) = t.epsilon_end {
            c.train.epsilon_end = v;
        }
        if let Some(v) = t.anneal_episodes {
            c.train.anneal_episodes = v;
        }
        if let Some(v) = &t.algorithm {
            c.algorithm = v.clone();
        }

        let b = &o.bench;
        if let Some(v) = &b.bench_scenarios {
            c.bench_scenarios = v.clone();
        }
        if let Some(v) = &b.bench_methods {
            c.bench_methods = v
                .iter()
                .map(|m| parse_with("bench_methods", m))
                .collect::<Result<_, _>>()?;
        }
        if let Some(v) = b.reps {
            c.reps = v;
        }
        if let Some(v) = b.steps_per_rep {
            c.steps_per_rep = v;
        }

        let r = &o.report;
        if let Some(v) = &r.input {
            c.inputs = v.clone();
        }
        if let Some(v) = r.bootstrap_resamples {
            c.bootstrap_resamples = v;
        }
        if let Some(v) = &r.taus {
            c.taus = v.clone();
        }
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.intervals == 0 {
            return bad("intervals must be at least 1");
        }
        if self.methods.is_empty() {
            return bad("at least one method is required");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1");
        }
        if self.shapley_cap > MAX_EXACT_AGENTS {
            return bad(&format!("shapley_cap must not exceed {MAX_EXACT_AGENTS}"));
        }
        if !(self.tie_epsilon.is_finite() && self.tie_epsilon >= 0.0) {
            return bad("tie_epsilon must be finite and non-negative");
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1");
        }
        if self.reps == 0 || self.steps_per_rep == 0 {
            return bad("reps and steps_per_rep must be at least 1");
        }
        if self.taus.iter().any(|t| !t.is_finite()) {
            return bad("taus must be finite");
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn attribution_options(&self, seed: u64) -> marl_credit::attribution::AttributionOptions {
        marl_credit::attribution::AttributionOptions {
            proxy: self.proxy,
            seed,
            shapley_cap: self.shapley_cap,
            mc_samples: self.mc_samples,
            sampler: self.sampler,
            parallel: self.parallel,
        }
    }
}
