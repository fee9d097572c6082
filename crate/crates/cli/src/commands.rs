//! The six subcommands. Each takes a resolved [`Config`] and returns the
//! paths it wrote.

use std::collections::BTreeMap;
use std::path::PathBuf;

use marl_credit::attribution::{attribute, attribute_interval, IntervalAttribution, Method};
use marl_credit::bench::{run_scaling, BenchConfig, BenchOutcome};
use marl_credit::env::{encode_joint, Environment, TraceHeader, TraceRecord, TRACE_SCHEMA};
use marl_credit::evaluation::{
    absolute_metric, aggregate, pearson, per_agent_rank_agreement, performance_profile, population_variance,
    probability_of_improvement, rank_agreement_rate, Bounds, EvalError, RunMatrix, ABSOLUTE_METRIC_MULTIPLIER,
};
use marl_credit::policy::{
    evaluate, greedy_policies, train_iql, train_iql_with, write_policy, EvalSchedule, PolicyHeader, TrainConfig,
};
use marl_credit::rollout::rollout;
use marl_credit::seed::{derive_rng, derive_seed};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::output::{find_inputs, read_csv, write_atomic, write_csv};
use crate::scenario::{fixed_policies, AnyEnv};
use crate::{with_env, CliError};

/// Metric name for the per-agent individual reward, the ground truth.
pub const INDIVIDUAL: &str = "individual";

fn env_of(c: &Config) -> Result<AnyEnv, CliError> {
    AnyEnv::parse(&c.scenario, c.reward_rule, c.max_steps)
}

/// Rolls out `episodes` episodes and writes `traces.jsonl`: a header line,
/// then one record per timestep.
pub fn cmd_simulate(c: &Config) -> Result<Vec<PathBuf>, CliError> {
    let any = env_of(c)?;
    let policies = fixed_policies(&c.policy, &any)?;
    let header = TraceHeader {
        schema: TRACE_SCHEMA.into(),
        scenario: any.name(),
        seed: c.seed,
        policy: c.policy.clone(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    with_env!(&any, env => {
        for e in 0..c.episodes as u64 {
            let mut rng = derive_rng(c.seed, "policy", e);
            let trajectory = rollout(env, &policies, derive_seed(c.seed, "reset", e), &mut rng)?;
            for (t, tr) in trajectory.into_iter().enumerate() {
                let record = TraceRecord {
                    episode: e,
                    t: t as u32,
                    actions: encode_joint(&tr.joint),
                    team_reward: tr.team_reward,
                    individual_rewards: tr.individual_rewards,
                    done: tr.done,
                };
                out.push_str(&serde_json::to_string(&record)?);
                out.push('\n');
            }
        }
    });
    let path = c.out.join("traces.jsonl");
    write_atomic(&path, out.as_bytes())?;
    Ok(vec![path])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub run: u64,
    pub interval: usize,
    pub episode: u64,
    pub mean_return: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub algorithm: String,
    pub task: String,
    pub run: u64,
    pub score: f64,
}

struct TrainRun {
    seed: u64,
    policy: String,
    curve: Vec<CurveRow>,
    absolute: f64,
}

fn train_config(c: &Config, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..c.train.clone()
    }
}

fn schedule(c: &Config) -> EvalSchedule {
    EvalSchedule {
        intervals: c.intervals,
        episodes_per_interval: c.episodes,
    }
}

fn train_run(c: &Config, any: &AnyEnv, seed: u64) -> Result<TrainRun, CliError> {
    with_env!(any, env => {
        let trained = train_iql(env, &train_config(c, seed), Some(schedule(c)))?;
        let absolute = absolute_metric::<_, _, CliError>(&trained.curve, ABSOLUTE_METRIC_MULTIPLIER, |tables, n| {
            Ok(evaluate(env, &greedy_policies(tables), n, seed, "absolute")?)
        })?;
        let header = PolicyHeader { kind: "tabular_q".into(), scenario: env.name(), seed };
        let curve = trained
            .curve
            .iter()
            .map(|r| CurveRow {
                run: seed,
                interval: r.index,
                episode: r.episode,
                mean_return: r.mean_return,
                std_error: r.std_error,
            })
            .collect();
        Ok(TrainRun { seed, policy: write_policy(&header, &trained.tables), curve, absolute })
    })
}

/// Trains one independent Q-learner set per seed on a bounded worker pool.
/// Each run writes `runs/seed_<s>/{policy.txt,learning_curve.csv}`; the
/// merged `learning_curve.csv` and `scores.csv` (absolute metric per run)
/// follow seed order.
pub fn cmd_train(c: &Config) -> Result<Vec<PathBuf>, CliError> {
    if c.episodes == 0 {
        return Err(CliError::Config(
            "train needs at least one evaluation episode per interval".into(),
        ));
    }
    let any = env_of(c)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(c.jobs)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let runs: Vec<TrainRun> = pool.install(|| {
        c.seeds
            .par_iter()
            .map(|&s| train_run(c, &any, s))
            .collect::<Result<_, _>>()
    })?;

    let curve_header = ["run", "interval", "episode", "mean_return", "std_error"];
    let mut written = Vec::new();
    let mut merged = Vec::new();
    let mut scores = Vec::new();
    for run in &runs {
        let dir = c.out.join("runs").join(format!("seed_{}", run.seed));
        write_atomic(&dir.join("policy.txt"), run.policy.as_bytes())?;
        write_csv(&dir.join("learning_curve.csv"), &curve_header, &run.curve)?;
        written.push(dir.join("policy.txt"));
        written.push(dir.join("learning_curve.csv"));
        merged.extend(run.curve.iter().cloned());
        scores.push(ScoreRow {
            algorithm: c.algorithm.clone(),
            task: any.name(),
            run: run.seed,
            score: run.absolute,
        });
    }
    let curve_path = c.out.join("learning_curve.csv");
    write_csv(&curve_path, &curve_header, &merged)?;
    let scores_path = c.out.join("scores.csv");
    write_csv(&scores_path, &["algorithm", "task", "run", "score"], &scores)?;
    written.push(curve_path);
    written.push(scores_path);
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRow {
    pub interval: usize,
    pub t: usize,
    pub agent: usize,
    pub method: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub interval: usize,
    pub agent: usize,
    pub method: String,
    pub mean: f64,
    pub variance_across_team: f64,
}

/// Attributes every timestep of `intervals` evaluation intervals with each
/// configured method. Policy `iql` trains with the root seed and attributes
/// the greedy policy at each evaluation point; other policies are fixed and
/// every interval draws fresh episodes.
///
/// Writes `attribution.csv` (per step) and `summary.csv` (interval means,
/// including the individual-reward ground truth).
pub fn cmd_attribute(c: &Config) -> Result<Vec<PathBuf>, CliError> {
    if c.episodes == 0 {
        return Err(CliError::Config(
            "attribute needs at least one episode per interval".into(),
        ));
    }
    let any = env_of(c)?;
    let n = any.n_agents();
    if c.methods.contains(&Method::ExactShapley) && n > c.shapley_cap {
        return Err(CliError::Config(format!(
            "exact Shapley with {n} agents exceeds shapley_cap {}",
            c.shapley_cap
        )));
    }
    let options = c.attribution_options(c.seed);
    let mut per_method: Vec<Vec<IntervalAttribution>> = vec![Vec::new(); c.methods.len()];
    with_env!(&any, env => {
        if c.policy == "iql" {
            train_iql_with(env, &train_config(c, c.seed), Some(schedule(c)), |record, policies| {
                for (k, &m) in c.methods.iter().enumerate() {
                    per_method[k].push(attribute_interval(env, policies, record.index, c.episodes, m, &options)?);
                }
                Ok::<(), CliError>(())
            })?;
        } else {
            let policies = fixed_policies(&c.policy, &any)?;
            for (k, &m) in c.methods.iter().enumerate() {
                per_method[k] = attribute(env, &policies, c.intervals, c.episodes, m, &options)?.intervals;
            }
        }
    });

    let mut steps = Vec::new();
    let mut summary = Vec::new();
    for (k, &m) in c.methods.iter().enumerate() {
        for iv in &per_method[k] {
            for s in &iv.steps {
                for (agent, &value) in s.values.iter().enumerate() {
                    steps.push(AttributionRow {
                        interval: iv.interval,
                        t: s.t,
                        agent,
                        method: m.as_str().into(),
                        value,
                    });
                }
            }
            let variance = iv.variance_across_team();
            for (agent, &mean) in iv.means.iter().enumerate() {
                summary.push(SummaryRow {
                    interval: iv.interval,
                    agent,
                    method: m.as_str().into(),
                    mean,
                    variance_across_team: variance,
                });
            }
        }
    }
    // Every method sees the same trajectories, so the ground truth is taken
    // from the first.
    for iv in &per_method[0] {
        let variance = population_variance(&iv.individual_means);
        for (agent, &mean) in iv.individual_means.iter().enumerate() {
            summary.push(SummaryRow {
                interval: iv.interval,
                agent,
                method: INDIVIDUAL.into(),
                mean,
                variance_across_team: variance,
            });
        }
    }
    let steps_path = c.out.join("attribution.csv");
    write_csv(&steps_path, &["interval", "t", "agent", "method", "value"], &steps)?;
    let summary_path = c.out.join("summary.csv");
    write_csv(
        &summary_path,
        &["interval", "agent", "method", "mean", "variance_across_team"],
        &summary,
    )?;
    Ok(vec![steps_path, summary_path])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub metric_a: String,
    pub metric_b: String,
    pub agent: usize,
    /// NaN when either series is constant.
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub pair: String,
    /// Agent index, or `all` for whole-ranking agreement.
    pub agent: String,
    pub rate: f64,
}

/// `series[agent][interval]` per metric, in order of first appearance.
/// Metric name with per-agent series over intervals.
pub type MetricSeries = (String, Vec<Vec<f64>>);

pub fn summary_series(rows: &[SummaryRow]) -> Result<Vec<MetricSeries>, CliError> {
    let mut intervals: Vec<usize> = rows.iter().map(|r| r.interval).collect();
    intervals.sort_unstable();
    intervals.dedup();
    let n = rows.iter().map(|r| r.agent + 1).max().unwrap_or(0);
    let mut metrics: Vec<(String, Vec<Vec<Option<f64>>>)> = Vec::new();
    for r in rows {
        let k = match metrics.iter().position(|(m, _)| *m == r.method) {
            Some(k) => k,
            None => {
                metrics.push((r.method.clone(), vec![vec![None; intervals.len()]; n]));
                metrics.len() - 1
            }
        };
        let col = intervals.binary_search(&r.interval).expect("collected above");
        metrics[k].1[r.agent][col] = Some(r.mean);
    }
    metrics
        .into_iter()
        .map(|(m, series)| {
            let full = series
                .into_iter()
                .map(|s| s.into_iter().collect::<Option<Vec<f64>>>())
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| CliError::Runtime(format!("summary is missing rows for {m}")))?;
            Ok((m, full))
        })
        .collect()
}

/// Per-agent Pearson correlation for every ordered pair of metrics, and rank
/// agreement for every unordered pair, from an attribution `summary.csv`.
pub fn cmd_correlate(c: &Config) -> Result<Vec<PathBuf>, CliError> {
    let inputs = if c.inputs.is_empty() {
        vec![c.out.clone()]
    } else {
        c.inputs.clone()
    };
    let found = find_inputs(&inputs, "summary.csv")?;
    let [path] = found.as_slice() else {
        return Err(CliError::Config(format!(
            "expected one summary.csv among inputs, found {}",
            found.len()
        )));
    };
    let rows: Vec<SummaryRow> = read_csv(path)?;
    let metrics = summary_series(&rows)?;

    let mut correlations = Vec::new();
    for (a, sa) in &metrics {
        for (b, sb) in &metrics {
            for (agent, (xa, xb)) in sa.iter().zip(sb).enumerate() {
                let r = match pearson(xa, xb) {
                    Ok(r) => r,
                    Err(EvalError::DegenerateSeries) => {
                        eprintln!("agent {agent}: {a} vs {b}: DegenerateSeries");
                        f64::NAN
                    }
                    Err(e) => return Err(e.into()),
                };
                correlations.push(CorrelationRow {
                    metric_a: a.clone(),
                    metric_b: b.clone(),
                    agent,
                    r,
                });
            }
        }
    }

    let mut agreement = Vec::new();
    for (i, (a, sa)) in metrics.iter().enumerate() {
        for (b, sb) in &metrics[i + 1..] {
            let pair = format!("{a}_vs_{b}");
            let per_agent = per_agent_rank_agreement(sa, sb, c.tie_epsilon)?;
            for (agent, rate) in per_agent.into_iter().enumerate() {
                agreement.push(AgreementRow {
                    pair: pair.clone(),
                    agent: agent.to_string(),
                    rate,
                });
            }
            let rate = rank_agreement_rate(sa, sb, c.tie_epsilon)?;
            agreement.push(AgreementRow {
                pair,
                agent: "all".into(),
                rate,
            });
        }
    }
    let corr_path = c.out.join("correlation.csv");
    write_csv(&corr_path, &["metric_a", "metric_b", "agent", "r"], &correlations)?;
    let agree_path = c.out.join("agreement.csv");
    write_csv(&agree_path, &["pair", "agent", "rate"], &agreement)?;
    Ok(vec![corr_path, agree_path])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n_agents: usize,
    pub method: String,
    pub mean_s_per_step: f64,
    pub std_s_per_step: f64,
    pub evals_per_step: f64,
    pub parallel: bool,
}

/// Times each bench method on each bench scenario. Exact Shapley above the
/// cap is skipped with a note on standard error.
pub fn cmd_bench(c: &Config) -> Result<Vec<PathBuf>, CliError> {
    let config = BenchConfig {
        reps: c.reps,
        steps_per_rep: c.steps_per_rep,
        seed: c.seed,
        parallel: c.parallel,
        attribution: c.attribution_options(c.seed),
    };
    let mut rows = Vec::new();
    for name in &c.bench_scenarios {
        let any = AnyEnv::parse(name, c.reward_rule, c.max_steps)?;
        let results = with_env!(any, env => run_scaling(vec![env], &c.bench_methods, &config)?);
        for r in results {
            match r.outcome {
                BenchOutcome::Measured {
                    mean_s_per_step,
                    std_s_per_step,
                    evals_per_step,
                    ..
                } => rows.push(BenchRow {
                    n_agents: r.n_agents,
                    method: r.method.as_str().into(),
                    mean_s_per_step,
                    std_s_per_step,
                    evals_per_step,
                    parallel: r.parallel,
                }),
                BenchOutcome::Skipped { reason } => {
                    eprintln!("{} {}: skipped ({reason})", r.scenario, r.method.as_str())
                }
            }
        }
    }
    let path = c.out.join("bench.csv");
    write_csv(
        &path,
        &[
            "n_agents",
            "method",
            "mean_s_per_step",
            "std_s_per_step",
            "evals_per_step",
            "parallel",
        ],
        &rows,
    )?;
    Ok(vec![path])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub statistic: String,
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub tau: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub x: String,
    pub y: String,
    pub probability: f64,
}

/// Foraging returns already lie in [0, 1]; other tasks are scaled by the
/// best score seen for them across all inputs.
fn task_bounds(task: &str, all: &[ScoreRow]) -> Bounds {
    if task.starts_with("Foraging") {
        return Bounds { lo: 0.0, hi: 1.0 };
    }
    let scores = all.iter().filter(|r| r.task == task).map(|r| r.score);
    let hi = scores.clone().fold(f64::NEG_INFINITY, f64::max);
    let lo = scores.fold(0.0, f64::min);
    Bounds { lo, hi }
}

/// Merges `scores.csv` files and writes aggregate statistics with bootstrap
/// intervals and performance profiles over normalised scores. With several
/// algorithms each gets `aggregates_<alg>.csv` and `profiles_<alg>.csv`, and
/// `improvement.csv` holds pairwise probabilities of improvement.
pub fn cmd_report(c: &Config) -> Result<Vec<PathBuf>, CliError> {
    let inputs = if c.inputs.is_empty() {
        vec![c.out.clone()]
    } else {
        c.inputs.clone()
    };
    let files = find_inputs(&inputs, "scores.csv")?;
    if files.is_empty() {
        return Err(CliError::Config("no scores.csv among inputs".into()));
    }
    let mut all: Vec<ScoreRow> = Vec::new();
    for f in &files {
        all.extend(read_csv::<ScoreRow>(f)?);
    }
    let mut by_alg: BTreeMap<&str, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for r in &all {
        by_alg
            .entry(&r.algorithm)
            .or_default()
            .entry(&r.task)
            .or_default()
            .push(r.score);
    }
    let mut matrices = Vec::new();
    for (alg, tasks) in &by_alg {
        let names: Vec<String> = tasks.keys().map(|t| t.to_string()).collect();
        let bounds: Vec<Bounds> = names.iter().map(|t| task_bounds(t, &all)).collect();
        let m = RunMatrix::new(names, tasks.values().cloned().collect())?.normalized(&bounds)?;
        matrices.push((alg.to_string(), m));
    }

    let single = matrices.len() == 1;
    let mut written = Vec::new();
    for (k, (alg, m)) in matrices.iter().enumerate() {
        let mut rng = derive_rng(c.seed, "bootstrap", k as u64);
        let agg = aggregate(m, c.bootstrap_resamples, &mut rng);
        let rows: Vec<AggregateRow> = agg
            .rows()
            .iter()
            .map(|(s, e)| AggregateRow {
                statistic: s.to_string(),
                value: e.value,
                ci_lo: e.ci_lo,
                ci_hi: e.ci_hi,
            })
            .collect();
        let profile: Vec<ProfileRow> = c
            .taus
            .iter()
            .zip(performance_profile(m, &c.taus))
            .map(|(&tau, fraction)| ProfileRow { tau, fraction })
            .collect();
        let suffix = if single { String::new() } else { format!("_{alg}") };
        let agg_path = c.out.join(format!("aggregates{suffix}.csv"));
        write_csv(&agg_path, &["statistic", "value", "ci_lo", "ci_hi"], &rows)?;
        let prof_path = c.out.join(format!("profiles{suffix}.csv"));
        write_csv(&prof_path, &["tau", "fraction"], &profile)?;
        written.push(agg_path);
        written.push(prof_path);
    }
    if !single {
        let mut rows = Vec::new();
        for (x, mx) in &matrices {
            for (y, my) in &matrices {
                if x == y {
                    continue;
                }
                if mx.tasks != my.tasks {
                    eprintln!("{x} vs {y}: task sets differ, skipping probability of improvement");
                    continue;
                }
                rows.push(ImprovementRow {
                    x: x.clone(),
                    y: y.clone(),
                    probability: probability_of_improvement(mx, my)?,
                });
            }
        }
        let path = c.out.join("improvement.csv");
        write_csv(&path, &["x", "y", "probability"], &rows)?;
        written.push(path);
    }
    Ok(written)
}
