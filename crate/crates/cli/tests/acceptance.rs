//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line each, and exits non-zero if any fails.

use std::time::Instant;

use marl_credit::attribution::{
    attribute, attribute_interval, coalition_value, mc_shapley, shapley_by_permutations, AttributionOptions,
    Attributor, CoalitionMask, Method, RemovalProxy, Sampler,
};
use marl_credit::bench::{run_scaling, BenchConfig, BenchMethod, BenchOutcome, CountingEnv};
use marl_credit::env::{Action, Environment, LbfAction, LbfEnv, LbfState, WarehouseEnv};
use marl_credit::evaluation::{
    iqm, mean, optimality_gap, pearson, performance_profile, probability_of_improvement, rank_agreement_rate, RunMatrix,
};
use marl_credit::policy::{greedy_policies, train_iql, AgentPolicy, TrainConfig};
use marl_credit::rollout::{joint_action, rollout};
use marl_credit::seed::{derive_rng, derive_seed};
use marl_credit_cli::config::{AttributeOpts, GlobalOpts, Overrides};
use marl_credit_cli::{cmd_attribute, Config};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// States visited by random play, each with a fresh uniformly random joint
/// action.
fn random_states<E: Environment>(env: &E, count: usize, seed: u64) -> Vec<(E::State, Vec<E::Action>)> {
    let policies = vec![AgentPolicy::Random; env.n_agents()];
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(count);
    let mut episode = 0;
    while out.len() < count {
        let mut state = env.reset(derive_seed(seed, "reset", episode)).unwrap();
        episode += 1;
        while !env.is_done(&state) && out.len() < count {
            let walk = joint_action(env, &state, &policies, &mut r);
            if r.gen_bool(0.25) {
                let joint: Vec<E::Action> = (0..env.n_agents())
                    .map(|_| E::Action::ALL[r.gen_range(0..E::Action::count())])
                    .collect();
                out.push((state.clone(), joint));
            }
            state = env.step(&state, &walk).unwrap().next_state;
        }
    }
    out
}

/// Largest efficiency gap over `states`, with v(N) and v(empty) evaluated
/// directly.
fn efficiency_gap<E: Environment>(env: &E, states: &[(E::State, Vec<E::Action>)]) -> f64 {
    let a = Attributor::new(env);
    let n = env.n_agents();
    let mut worst: f64 = 0.0;
    for (s, joint) in states {
        let sh = a.exact_shapley_step(s, joint, &mut rng(0)).unwrap().values;
        let grand = coalition_value(env, s, joint, CoalitionMask::grand(n), RemovalProxy::NoOp, &mut rng(0)).unwrap();
        let empty = coalition_value(env, s, joint, CoalitionMask::empty(), RemovalProxy::NoOp, &mut rng(0)).unwrap();
        worst = worst.max((sh.iter().sum::<f64>() - (grand - empty)).abs());
    }
    worst
}

fn c1_efficiency() -> Outcome {
    let start = Instant::now();
    let lbf8 = LbfEnv::parse("Foraging-8x8-2p-2f").unwrap();
    let lbf10 = LbfEnv::parse("Foraging-10x10-3p-3f").unwrap();
    let rware = WarehouseEnv::parse("rware-tiny-2ag").unwrap();
    let gaps = [
        efficiency_gap(&lbf8, &random_states(&lbf8, 334, 1)),
        efficiency_gap(&lbf10, &random_states(&lbf10, 333, 2)),
        efficiency_gap(&rware, &random_states(&rware, 333, 3)),
    ];
    let secs = start.elapsed().as_secs_f64();
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    outcome(
        worst <= 1e-9 && secs <= 60.0,
        format!("1000 states, max gap {worst:.3e}, {secs:.2}s"),
    )
}

fn c2_single_agent_identity() -> Outcome {
    let env = LbfEnv::parse("Foraging-8x8-1p-3f").unwrap();
    let a = Attributor::new(&env);
    let policies = [AgentPolicy::GreedyLbf];
    let (mut steps, mut mismatches, mut nonzero) = (0, 0, 0);
    let mut episode = 0;
    while steps < 10_000 {
        let trajectory = rollout(
            &env,
            &policies,
            derive_seed(2, "reset", episode),
            &mut derive_rng(2, "policy", episode),
        )
        .unwrap();
        episode += 1;
        for tr in trajectory.iter().take(10_000 - steps) {
            let imp = a.importance_step(&tr.state, &tr.joint, &mut rng(0)).unwrap().values;
            let sh = a.exact_shapley_step(&tr.state, &tr.joint, &mut rng(0)).unwrap().values;
            if imp[0].to_bits() != sh[0].to_bits() {
                mismatches += 1;
            }
            if imp[0] != 0.0 {
                nonzero += 1;
            }
            steps += 1;
        }
    }
    outcome(
        mismatches == 0 && nonzero > 0,
        format!("{steps} steps, {mismatches} mismatches, {nonzero} rewarded"),
    )
}

/// Greedy-play states on the fixed-level scenario where the factual step is
/// rewarded, so every coalition structure is exercised.
fn fixed_three_agent_states(count: usize) -> (LbfEnv, Vec<(LbfState, Vec<LbfAction>)>) {
    let env = LbfEnv::parse("Foraging-6x6-3p-3f-det-max-food-sum").unwrap();
    let policies = vec![AgentPolicy::GreedyLbf; 3];
    let mut out = Vec::new();
    let mut seed = 0;
    while out.len() < count {
        for tr in rollout(&env, &policies, seed, &mut rng(seed)).unwrap() {
            if tr.team_reward > 0.0 && out.len() < count {
                out.push((tr.state, tr.joint));
            }
        }
        seed += 1;
    }
    (env, out)
}

fn c3_mc_convergence() -> Outcome {
    let (env, states) = fixed_three_agent_states(10);
    let a = Attributor::new(&env);
    let (mut worst_z, mut worst_enum, mut misses) = (0.0f64, 0.0f64, 0);
    for (k, (s, joint)) in states.iter().enumerate() {
        let exact = a.exact_shapley_step(s, joint, &mut rng(0)).unwrap().values;
        let steps = [(s.clone(), joint.clone())];
        let est = mc_shapley(
            &env,
            &steps,
            10_000,
            RemovalProxy::NoOp,
            Sampler::Permutation,
            &mut rng(100 + k as u64),
        )
        .unwrap();
        for i in 0..3 {
            let err = (est.means[i] - exact[i]).abs();
            // A zero standard error means every sampled marginal was the same
            // value; only rounding may separate it from the exact value.
            let tol = (5.0 * est.std_errors[i]).max(1e-12);
            if err > tol {
                misses += 1;
            }
            if est.std_errors[i] > 1e-12 {
                worst_z = worst_z.max(err / est.std_errors[i]);
            }
        }
        let perm = shapley_by_permutations(&env, s, joint).unwrap();
        for (x, y) in exact.iter().zip(&perm) {
            worst_enum = worst_enum.max((x - y).abs());
        }
    }
    outcome(
        misses == 0 && worst_enum <= 1e-12,
        format!("10 states, {misses} outside 5 SE (worst {worst_z:.2} SE), enumeration gap {worst_enum:.1e}"),
    )
}

fn c4_cost_accounting() -> Outcome {
    let mut ok = true;
    let mut counts = Vec::new();
    for name in ["Foraging-5x5-2p-2f", "Foraging-10x10-4p-4f", "Foraging-15x15-10p-10f"] {
        let env = CountingEnv::new(LbfEnv::parse(name).unwrap());
        let n = env.n_agents() as u64;
        let a = Attributor::new(&env);
        for (s, joint) in random_states(&env, 5, n) {
            env.reset_count();
            let imp = a.importance_step(&s, &joint, &mut rng(0)).unwrap();
            ok &= imp.coalition_evals == n && env.transitions() == n + 1;
            env.reset_count();
            let sh = a.exact_shapley_step(&s, &joint, &mut rng(0)).unwrap();
            ok &= sh.coalition_evals == 1 << n && env.transitions() == 1 << n;
        }
        counts.push(format!("n={n}: {}/{}", n, 1u64 << n));
    }
    let config = BenchConfig {
        reps: 3,
        steps_per_rep: 10,
        ..BenchConfig::default()
    };
    let env = LbfEnv::parse("Foraging-15x15-10p-10f").unwrap();
    let results = run_scaling(
        vec![env],
        &[BenchMethod::IMPORTANCE, BenchMethod::EXACT_SHAPLEY],
        &config,
    )
    .unwrap();
    let time = |k: usize| match results[k].outcome {
        BenchOutcome::Measured { mean_s_per_step, .. } => mean_s_per_step,
        BenchOutcome::Skipped { .. } => f64::NAN,
    };
    let ratio = time(1) / time(0);
    outcome(
        ok && ratio >= 10.0,
        format!("counts {} exact; wall-time ratio at n=10 {ratio:.1}", counts.join(", ")),
    )
}

/// Interval-mean importance over at least 1000 timesteps.
fn reliable_means(env: &LbfEnv, policies: &[AgentPolicy], seed: u64) -> (Vec<f64>, usize) {
    let opts = AttributionOptions {
        seed,
        ..AttributionOptions::default()
    };
    let mut episodes = 32;
    loop {
        let iv = attribute_interval(env, policies, 0, episodes, Method::Importance, &opts).unwrap();
        if iv.timesteps >= 1000 {
            return (iv.means, iv.timesteps);
        }
        episodes *= 2;
    }
}

fn ordered(s: &[f64]) -> bool {
    s[2] >= s[1] && s[1] >= s[0]
}

fn c5_reliability() -> Outcome {
    let env = LbfEnv::parse("Foraging-15x15-3p-3f-det-max-food-sum").unwrap();
    let greedy = vec![AgentPolicy::GreedyLbf; 3];
    let mut greedy_ok = 0;
    let mut min_t = usize::MAX;
    for seed in 0..10 {
        let (means, t) = reliable_means(&env, &greedy, seed);
        min_t = min_t.min(t);
        greedy_ok += ordered(&means) as usize;
    }

    // Tabular learners need a small fully reachable state space: same fixed
    // levels, sight 1 on a 5x5 grid.
    let small = LbfEnv::parse("Foraging-1s-5x5-3p-3f-det-max-food-sum").unwrap();
    let mut iql_ok = 0;
    let mut failed = Vec::new();
    for seed in 0..10 {
        let config = TrainConfig {
            episodes: 50_000,
            anneal_episodes: 25_000,
            seed,
            ..TrainConfig::default()
        };
        let trained = train_iql(&small, &config, None).unwrap();
        let (means, t) = reliable_means(&small, &greedy_policies(&trained.tables), seed);
        min_t = min_t.min(t);
        if ordered(&means) {
            iql_ok += 1;
        } else {
            failed.push(format!(
                "seed {seed} {:?}",
                means.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>()
            ));
        }
    }
    let detail = format!(
        "greedy {greedy_ok}/10, iql {iql_ok}/10 ordered, min T {min_t}{}",
        if failed.is_empty() {
            String::new()
        } else {
            format!("; unordered: {}", failed.join(", "))
        }
    );
    outcome(greedy_ok >= 9 && iql_ok >= 9 && min_t >= 1000, detail)
}

struct CorrelationRun {
    name: &'static str,
    r_shapley: Vec<f64>,
    r_individual: Vec<f64>,
    agree_importance: f64,
    agree_shapley: f64,
}

fn correlation_run(name: &'static str) -> CorrelationRun {
    let env = LbfEnv::parse(name).unwrap();
    let policies = vec![AgentPolicy::GreedyLbf; env.n_agents()];
    let opts = AttributionOptions::default();
    let imp = attribute(&env, &policies, 50, 32, Method::Importance, &opts).unwrap();
    let sh = attribute(&env, &policies, 50, 32, Method::ExactShapley, &opts).unwrap();
    let (ai, s, ind) = (imp.mean_series(), sh.mean_series(), imp.individual_series());
    assert_eq!(ind, sh.individual_series());
    let r = |x: &[Vec<f64>], y: &[Vec<f64>]| -> Vec<f64> {
        x.iter()
            .zip(y)
            .map(|(a, b)| pearson(a, b).unwrap_or(f64::NAN))
            .collect()
    };
    CorrelationRun {
        name,
        r_shapley: r(&ai, &s),
        r_individual: r(&ai, &ind),
        agree_importance: rank_agreement_rate(&ai, &ind, 1e-9).unwrap(),
        agree_shapley: rank_agreement_rate(&s, &ind, 1e-9).unwrap(),
    }
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

fn c6_correlation(runs: &[CorrelationRun]) -> Outcome {
    let pass = runs
        .iter()
        .all(|r| r.r_shapley.iter().chain(&r.r_individual).all(|&v| v >= 0.8));
    let detail = runs
        .iter()
        .map(|r| {
            format!(
                "{}: r(AI,SH) {} r(AI,ind) {}",
                r.name,
                fmt(&r.r_shapley),
                fmt(&r.r_individual)
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, format!("50 intervals x 32 episodes; {detail}"))
}

fn c7_rank_agreement(runs: &[CorrelationRun]) -> Outcome {
    let pass = runs
        .iter()
        .all(|r| r.agree_importance >= 0.7 && r.agree_shapley >= 0.7 && r.agree_shapley >= r.agree_importance - 0.1);
    let detail = runs
        .iter()
        .map(|r| format!("{}: AI {:.2} SH {:.2}", r.name, r.agree_importance, r.agree_shapley))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, detail)
}

/// Rolls out `steps` steps where the last agent always idles, and counts
/// steps where it receives non-zero credit under either method.
fn dummy_violations<E: Environment>(env: &E, mut policies: Vec<AgentPolicy>, steps: usize) -> (usize, usize) {
    let n = env.n_agents();
    policies[n - 1] = AgentPolicy::Idle;
    let a = Attributor::new(env);
    let (mut seen, mut bad, mut episode) = (0, 0, 0);
    while seen < steps {
        let trajectory = rollout(
            env,
            &policies,
            derive_seed(8, "reset", episode),
            &mut derive_rng(8, "policy", episode),
        )
        .unwrap();
        episode += 1;
        for tr in trajectory.iter().take(steps - seen) {
            let imp = a.importance_step(&tr.state, &tr.joint, &mut rng(0)).unwrap().values;
            let sh = a.exact_shapley_step(&tr.state, &tr.joint, &mut rng(0)).unwrap().values;
            if imp[n - 1] != 0.0 || sh[n - 1] != 0.0 {
                bad += 1;
            }
            seen += 1;
        }
    }
    (seen, bad)
}

fn c8_dummy_agent() -> Outcome {
    let lbf = LbfEnv::parse("Foraging-8x8-3p-2f").unwrap();
    let (s1, b1) = dummy_violations(&lbf, vec![AgentPolicy::GreedyLbf; 3], 1000);
    let rware = WarehouseEnv::parse("rware-tiny-3ag").unwrap();
    let (s2, b2) = dummy_violations(&rware, vec![AgentPolicy::Random; 3], 1000);
    outcome(
        b1 == 0 && b2 == 0,
        format!("foraging {s1} steps {b1} nonzero; warehouse {s2} steps {b2} nonzero"),
    )
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str| -> Vec<Vec<u8>> {
        let overrides = Overrides {
            global: GlobalOpts {
                scenario: Some("Foraging-8x8-3p-3f".into()),
                policy: Some("greedy".into()),
                seed: Some(13),
                out: Some(dir.path().join(out)),
                episodes: Some(4),
                intervals: Some(6),
                method: Some(vec!["importance".into(), "shapley".into(), "mc-shapley".into()]),
                proxy: Some("random".into()),
                ..GlobalOpts::default()
            },
            attribute: AttributeOpts {
                mc_samples: Some(8),
                parallel: Some(true),
                ..AttributeOpts::default()
            },
            ..Overrides::default()
        };
        let config = Config::resolve(&overrides).unwrap();
        cmd_attribute(&config)
            .unwrap()
            .iter()
            .map(|p| std::fs::read(p).unwrap())
            .collect()
    };
    let (a, b) = (run("a"), run("b"));
    let bytes: usize = a.iter().map(Vec::len).sum();
    outcome(
        a == b && bytes > 0,
        format!("{} files, {bytes} bytes, identical: {}", a.len(), a == b),
    )
}

fn c10_evaluation_units() -> Outcome {
    let xs: Vec<f64> = (1..=8).map(f64::from).collect();
    let iqm_ok = iqm(&xs) == 4.5;
    let gap = optimality_gap(&[0.85]);
    let gap_ok = gap == 1.0 - mean(&[0.85]) && format!("{gap:.2}") == "0.15";
    let mut r = rng(10);
    let scores: Vec<Vec<f64>> = (0..4).map(|_| (0..7).map(|_| r.gen::<f64>()).collect()).collect();
    let m = RunMatrix::new((0..4).map(|t| format!("task{t}")).collect(), scores).unwrap();
    let poi_ok = probability_of_improvement(&m, &m).unwrap() == 0.5;
    let taus: Vec<f64> = (0..=100).map(|k| k as f64 / 100.0).collect();
    let profile = performance_profile(&m, &taus);
    let mono_ok = profile.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        iqm_ok && gap_ok && poi_ok && mono_ok,
        format!(
            "iqm {} gap {gap} poi(X,X) {} profile monotone {mono_ok}",
            iqm(&xs),
            probability_of_improvement(&m, &m).unwrap()
        ),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let o = f();
        println!(
            "{} {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        results.push((name, o));
    };
    run("1 shapley efficiency", &c1_efficiency);
    run("2 single-agent identity", &c2_single_agent_identity);
    run("3 mc convergence", &c3_mc_convergence);
    run("4 cost accounting", &c4_cost_accounting);
    run("5 reliability ordering", &c5_reliability);
    let corr = [
        correlation_run("Foraging-8x8-2p-2f"),
        correlation_run("Foraging-15x15-3p-3f-det-max-food-sum"),
    ];
    run("6 correlation", &|| c6_correlation(&corr));
    run("7 rank agreement", &|| c7_rank_agreement(&corr));
    run("8 dummy agent", &c8_dummy_agent);
    run("9 determinism", &c9_determinism);
    run("10 evaluation units", &c10_evaluation_units);

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("acceptance: {}/{} passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
