//! Scenario and policy resolution.

use std::path::Path;

use marl_credit::env::lbf::RewardRule;
use marl_credit::env::{Environment, LbfEnv, LbfScenario, WarehouseEnv, WarehouseScenario};
use marl_credit::policy::{greedy_policies, read_policy, AgentPolicy};

use crate::CliError;

/// One of the two environments, picked by scenario name.
#[derive(Debug, Clone)]
pub enum AnyEnv {
    Lbf(LbfEnv),
    Warehouse(WarehouseEnv),
}

/// Runs `$body` with `$env` bound to the concrete environment.
#[macro_export]
macro_rules! with_env {
    ($any:expr, $env:ident => $body:expr) => {
        match $any {
            $crate::scenario::AnyEnv::Lbf($env) => $body,
            $crate::scenario::AnyEnv::Warehouse($env) => $body,
        }
    };
}

impl AnyEnv {
    pub fn parse(name: &str, reward_rule: RewardRule, max_steps: Option<u32>) -> Result<Self, CliError> {
        let config = |e: marl_credit::env::ParseError| CliError::Config(e.to_string());
        if name.starts_with("rware-") {
            let mut sc = WarehouseScenario::parse(name).map_err(config)?;
            if let Some(m) = max_steps {
                sc = sc.with_max_steps(m);
            }
            Ok(AnyEnv::Warehouse(WarehouseEnv::new(sc)))
        } else {
            let mut sc = LbfScenario::parse(name).map_err(config)?.with_reward_rule(reward_rule);
            if let Some(m) = max_steps {
                sc = sc.with_max_steps(m);
            }
            Ok(AnyEnv::Lbf(LbfEnv::new(sc)))
        }
    }

    pub fn n_agents(&self) -> usize {
        with_env!(self, env => env.n_agents())
    }

    pub fn name(&self) -> String {
        with_env!(self, env => env.name())
    }

    pub fn is_lbf(&self) -> bool {
        matches!(self, AnyEnv::Lbf(_))
    }
}

/// Policies that need no training.
pub fn fixed_policies(spec: &str, env: &AnyEnv) -> Result<Vec<AgentPolicy>, CliError> {
    let n = env.n_agents();
    match spec {
        "random" => Ok(vec![AgentPolicy::Random; n]),
        "idle" => Ok(vec![AgentPolicy::Idle; n]),
        "greedy" if env.is_lbf() => Ok(vec![AgentPolicy::GreedyLbf; n]),
        "greedy" => Err(CliError::Config(
            "greedy policy only applies to foraging scenarios".into(),
        )),
        "iql" => Err(CliError::Config(
            "iql policy must be trained; use train or attribute".into(),
        )),
        path => load_policy_file(Path::new(path), env),
    }
}

/// Greedy tabular policies from a policy_v1 file.
pub fn load_policy_file(path: &Path, env: &AnyEnv) -> Result<Vec<AgentPolicy>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("unknown policy {:?}: {e}", path.display().to_string())))?;
    let (header, tables) = read_policy(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if header.scenario != env.name() {
        return Err(CliError::Config(format!(
            "{} was trained on {}, not {}",
            path.display(),
            header.scenario,
            env.name()
        )));
    }
    if tables.len() != env.n_agents() {
        return Err(CliError::Config(format!(
            "{} has {} agents, scenario has {}",
            path.display(),
            tables.len(),
            env.n_agents()
        )));
    }
    Ok(greedy_policies(&tables))
}
