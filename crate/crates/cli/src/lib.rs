//! Command-line front end for `marl-credit`.
//!
//! Subcommands: `simulate`, `train`, `attribute`, `correlate`, `bench` and
//! `report`. Settings come from defaults, then an optional TOML file
//! (`--config`), then flags. Exit codes: 0 success, 2 configuration error,
//! 3 runtime error.

pub mod commands;
pub mod config;
pub mod output;
pub mod scenario;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use marl_credit::attribution::AttributionError;
use marl_credit::env::EnvError;
use marl_credit::evaluation::EvalError;
use thiserror::Error;

pub use commands::{cmd_attribute, cmd_bench, cmd_correlate, cmd_report, cmd_simulate, cmd_train};
pub use config::{Config, Overrides};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::InfeasibleScenario(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<AttributionError> for CliError {
    fn from(e: AttributionError) -> Self {
        match e {
            AttributionError::Env(env) => env.into(),
            AttributionError::TooManyAgents { .. } | AttributionError::NoSamples | AttributionError::NoEpisodes => {
                CliError::Config(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "marl-credit",
    version,
    about = "Counterfactual credit attribution for cooperative gridworlds"
)]
pub struct Cli {
    /// TOML configuration file; flags override its keys
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub global: config::GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out episodes and write trace_v1 records to traces.jsonl
    Simulate,
    /// Train independent tabular Q-learners, one run per seed
    Train {
        #[command(flatten)]
        train: config::TrainOpts,
    },
    /// Attribute the team reward to agents at every timestep
    Attribute {
        #[command(flatten)]
        attribute: config::AttributeOpts,
        #[command(flatten)]
        train: config::TrainOpts,
    },
    /// Correlation and rank agreement between attribution metrics
    Correlate {
        #[command(flatten)]
        report: config::ReportOpts,
    },
    /// Time the attribution methods as the team grows
    Bench {
        #[command(flatten)]
        bench: config::BenchOpts,
        #[command(flatten)]
        attribute: config::AttributeOpts,
    },
    /// Aggregate run scores into summary statistics
    Report {
        #[command(flatten)]
        report: config::ReportOpts,
    },
}

impl Cli {
    /// Settings given as flags.
    pub fn overrides(&self) -> Overrides {
        let mut o = Overrides {
            global: self.global.clone(),
            ..Overrides::default()
        };
        match &self.command {
            Command::Simulate => {}
            Command::Train { train } => o.train = train.clone(),
            Command::Attribute { attribute, train } => {
                o.attribute = attribute.clone();
                o.train = train.clone();
            }
            Command::Correlate { report } | Command::Report { report } => o.report = report.clone(),
            Command::Bench { bench, attribute } => {
                o.bench = bench.clone();
                o.attribute = attribute.clone();
            }
        }
        o
    }

    pub fn config(&self) -> Result<Config, CliError> {
        let file = match &self.config {
            Some(p) => Overrides::from_file(p)?,
            None => Overrides::default(),
        };
        Config::resolve(&file.merge(&self.overrides()))
    }
}

pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let config = cli.config()?;
    match cli.command {
        Command::Simulate => cmd_simulate(&config),
        Command::Train { .. } => cmd_train(&config),
        Command::Attribute { .. } => cmd_attribute(&config),
        Command::Correlate { .. } => cmd_correlate(&config),
        Command::Bench { .. } => cmd_bench(&config),
        Command::Report { .. } => cmd_report(&config),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
