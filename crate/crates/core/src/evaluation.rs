//! Statistics for validating attributions and aggregating returns.
//!
//! Correlation and ranking agreement compare attribution methods against each
//! other and against individual rewards. The aggregation suite (median, IQM,
//! mean, optimality gap, performance profiles, probability of improvement,
//! absolute metric) summarises normalised returns across runs and tasks, with
//! stratified bootstrap confidence intervals.

use std::cmp::Ordering;

use rand::Rng;
use thiserror::Error;

use crate::attribution::AttributionReport;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("series has zero variance")]
    DegenerateSeries,
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} values, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("non-finite value in input")]
    NonFinite,
    #[error("best interval {0} has no stored policy snapshot")]
    MissingSnapshot(usize),
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn population_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Sample mean and standard error of the mean (`s / sqrt(n)`, zero for n < 2).
pub fn mean_and_std_error(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, (var / xs.len() as f64).sqrt())
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 100]`.
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = q / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    v
}

pub fn median(xs: &[f64]) -> f64 {
    percentile_sorted(&sorted(xs), 50.0)
}

/// Interquartile mean: drop `floor(n/4)` values from each end by count and
/// average the rest.
pub fn iqm(xs: &[f64]) -> f64 {
    let s = sorted(xs);
    let cut = s.len() / 4;
    mean(&s[cut..s.len() - cut])
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(EvalError::TooShort {
            needed: 2,
            got: x.len(),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::DegenerateSeries);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Dense, tie-aware ranks: rank 0 is the largest value; values within `eps`
/// of their sorted neighbour share a rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankVector(pub Vec<usize>);

impl RankVector {
    pub fn from_values(values: &[f64], eps: f64) -> Self {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| {
            values[b]
                .partial_cmp(&values[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut ranks = vec![0; values.len()];
        let mut rank = 0;
        for w in 0..order.len() {
            if w > 0 && values[order[w - 1]] - values[order[w]] > eps {
                rank += 1;
            }
            ranks[order[w]] = rank;
        }
        RankVector(ranks)
    }
}

/// Per-interval rank vectors from agent-major series (`series[agent][interval]`).
fn interval_ranks(series: &[Vec<f64>], eps: f64) -> Result<Vec<RankVector>, EvalError> {
    let intervals = series.first().map_or(0, Vec::len);
    if let Some(bad) = series.iter().find(|s| s.len() != intervals) {
        return Err(EvalError::LengthMismatch(intervals, bad.len()));
    }
    Ok((0..intervals)
        .map(|k| {
            let vals: Vec<f64> = series.iter().map(|s| s[k]).collect();
            RankVector::from_values(&vals, eps)
        })
        .collect())
}

/// Fraction of intervals where the metric ranks all agents exactly as the
/// ground truth does. Inputs are agent-major: `metric[agent][interval]`.
pub fn rank_agreement_rate(metric: &[Vec<f64>], truth: &[Vec<f64>], eps: f64) -> Result<f64, EvalError> {
    if metric.len() != truth.len() {
        return Err(EvalError::LengthMismatch(metric.len(), truth.len()));
    }
    let m = interval_ranks(metric, eps)?;
    let t = interval_ranks(truth, eps)?;
    if m.len() != t.len() {
        return Err(EvalError::LengthMismatch(m.len(), t.len()));
    }
    if m.is_empty() {
        return Err(EvalError::TooShort { needed: 1, got: 0 });
    }
    let hits = m.iter().zip(&t).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / m.len() as f64)
}

/// Per-agent variant: fraction of intervals where each agent's own rank
/// matches its ground-truth rank.
pub fn per_agent_rank_agreement(metric: &[Vec<f64>], truth: &[Vec<f64>], eps: f64) -> Result<Vec<f64>, EvalError> {
    if metric.len() != truth.len() {
        return Err(EvalError::LengthMismatch(metric.len(), truth.len()));
    }
    let m = interval_ranks(metric, eps)?;
    let t = interval_ranks(truth, eps)?;
    if m.len() != t.len() {
        return Err(EvalError::LengthMismatch(m.len(), t.len()));
    }
    if m.is_empty() {
        return Err(EvalError::TooShort { needed: 1, got: 0 });
    }
    Ok((0..metric.len())
        .map(|agent| {
            let hits = m.iter().zip(&t).filter(|(a, b)| a.0[agent] == b.0[agent]).count();
            hits as f64 / m.len() as f64
        })
        .collect())
}

/// Population variance across agents of interval-mean attribution, one value
/// per interval.
pub fn importance_variance(report: &AttributionReport) -> Result<Vec<f64>, EvalError> {
    if report.n_agents < 2 {
        return Err(EvalError::TooShort {
            needed: 2,
            got: report.n_agents,
        });
    }
    Ok(report.intervals.iter().map(|i| population_variance(&i.means)).collect())
}

/// Scores per task, one entry per run. Tasks may have different run counts.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMatrix {
    pub tasks: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

/// Normalisation bounds for one task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl RunMatrix {
    pub fn new(tasks: Vec<String>, scores: Vec<Vec<f64>>) -> Result<Self, EvalError> {
        if tasks.len() != scores.len() {
            return Err(EvalError::LengthMismatch(tasks.len(), scores.len()));
        }
        if scores.is_empty() || scores.iter().any(Vec::is_empty) {
            return Err(EvalError::TooShort { needed: 1, got: 0 });
        }
        if scores.iter().flatten().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite);
        }
        Ok(RunMatrix { tasks, scores })
    }

    /// Maps each task's scores to `[0, 1]` by its bounds, clamping.
    pub fn normalized(&self, bounds: &[Bounds]) -> Result<Self, EvalError> {
        if bounds.len() != self.scores.len() {
            return Err(EvalError::LengthMismatch(bounds.len(), self.scores.len()));
        }
        let scores = self
            .scores
            .iter()
            .zip(bounds)
            .map(|(runs, b)| {
                let span = b.hi - b.lo;
                runs.iter()
                    .map(|&v| {
                        if span > 0.0 {
                            ((v - b.lo) / span).clamp(0.0, 1.0)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(RunMatrix {
            tasks: self.tasks.clone(),
            scores,
        })
    }

    pub fn flat(&self) -> Vec<f64> {
        self.scores.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregates {
    pub median: Estimate,
    pub iqm: Estimate,
    pub mean: Estimate,
    pub optimality_gap: Estimate,
}

impl Aggregates {
    pub fn rows(&self) -> [(&'static str, Estimate); 4] {
        [
            ("median", self.median),
            ("iqm", self.iqm),
            ("mean", self.mean),
            ("optimality_gap", self.optimality_gap),
        ]
    }
}

pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 2000;

/// Optimality gap on normalised scores: `1 - mean`.
pub fn optimality_gap(xs: &[f64]) -> f64 {
    1.0 - mean(xs)
}

/// Percentile bootstrap CI, resampling runs with replacement within each task.
pub fn stratified_bootstrap<R: Rng + ?Sized>(
    matrix: &RunMatrix,
    statistic: impl Fn(&[f64]) -> f64,
    resamples: usize,
    confidence: f64,
    rng: &mut R,
) -> (f64, f64) {
    let total: usize = matrix.scores.iter().map(Vec::len).sum();
    let mut buf = Vec::with_capacity(total);
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            buf.clear();
            for runs in &matrix.scores {
                for _ in 0..runs.len() {
                    buf.push(runs[rng.gen_range(0..runs.len())]);
                }
            }
            statistic(&buf)
        })
        .collect();
    if stats.is_empty() {
        let v = statistic(&matrix.flat());
        return (v, v);
    }
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let tail = (1.0 - confidence) / 2.0 * 100.0;
    (percentile_sorted(&stats, tail), percentile_sorted(&stats, 100.0 - tail))
}

/// Median, IQM, mean and optimality gap with 95% stratified bootstrap CIs.
pub fn aggregate<R: Rng + ?Sized>(matrix: &RunMatrix, resamples: usize, rng: &mut R) -> Aggregates {
    let flat = matrix.flat();
    let mut est = |f: fn(&[f64]) -> f64| {
        let (ci_lo, ci_hi) = stratified_bootstrap(matrix, f, resamples, 0.95, rng);
        Estimate {
            value: f(&flat),
            ci_lo,
            ci_hi,
        }
    };
    Aggregates {
        median: est(median),
        iqm: est(iqm),
        mean: est(mean),
        optimality_gap: est(optimality_gap),
    }
}

/// Fraction of (run, task) scores strictly above each threshold.
pub fn performance_profile(matrix: &RunMatrix, taus: &[f64]) -> Vec<f64> {
    let flat = matrix.flat();
    taus.iter()
        .map(|&tau| flat.iter().filter(|&&v| v > tau).count() as f64 / flat.len() as f64)
        .collect()
}

/// `P(X > Y)`: per task, the fraction of run pairs where X beats Y (ties count
/// one half), averaged over tasks.
pub fn probability_of_improvement(x: &RunMatrix, y: &RunMatrix) -> Result<f64, EvalError> {
    if x.scores.len() != y.scores.len() {
        return Err(EvalError::LengthMismatch(x.scores.len(), y.scores.len()));
    }
    let per_task: Vec<f64> = x
        .scores
        .iter()
        .zip(&y.scores)
        .map(|(xs, ys)| {
            let mut wins = 0.0;
            for a in xs {
                for b in ys {
                    wins += match a.partial_cmp(b) {
                        Some(Ordering::Greater) => 1.0,
                        Some(Ordering::Equal) => 0.5,
                        _ => 0.0,
                    };
                }
            }
            wins / (xs.len() * ys.len()) as f64
        })
        .collect();
    Ok(mean(&per_task))
}

/// One evaluation point of a learning run.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalRecord<P> {
    pub index: usize,
    /// Training episode at which the evaluation happened.
    pub episode: u64,
    pub mean_return: f64,
    pub std_error: f64,
    /// Episodes in the online evaluation.
    pub episodes: usize,
    pub snapshot: Option<P>,
}

/// Index of the interval with the highest mean return (first on ties).
pub fn best_interval<P>(curve: &[IntervalRecord<P>]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in curve.iter().enumerate() {
        if best.is_none_or(|b| r.mean_return > curve[b].mean_return) {
            best = Some(i);
        }
    }
    best
}

pub const ABSOLUTE_METRIC_MULTIPLIER: usize = 10;

/// Re-evaluates the best interval's policy for `multiplier` times its online
/// episode count and returns the mean return. `evaluate` receives the
/// snapshot and the episode count and returns per-episode returns.
pub fn absolute_metric<P, F, E>(curve: &[IntervalRecord<P>], multiplier: usize, mut evaluate: F) -> Result<f64, E>
where
    F: FnMut(&P, usize) -> Result<Vec<f64>, E>,
    E: From<EvalError>,
{
    let best = best_interval(curve).ok_or(EvalError::TooShort { needed: 1, got: 0 })?;
    let rec = &curve[best];
    let snapshot = rec.snapshot.as_ref().ok_or(EvalError::MissingSnapshot(best))?;
    let returns = evaluate(snapshot, rec.episodes * multiplier)?;
    Ok(mean(&returns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matrix(scores: Vec<Vec<f64>>) -> RunMatrix {
        let tasks = (0..scores.len()).map(|i| format!("t{i}")).collect();
        RunMatrix::new(tasks, scores).unwrap()
    }

    #[test]
    fn pearson_extremes() {
        let x = [1.0, 2.0, 3.0, 5.0];
        assert_eq!(pearson(&x, &x), Ok(1.0));
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(pearson(&x, &neg), Ok(-1.0));
        assert_eq!(pearson(&x, &[1.0; 4]), Err(EvalError::DegenerateSeries));
        assert!(matches!(pearson(&x, &[1.0]), Err(EvalError::LengthMismatch(4, 1))));
    }

    #[test]
    fn pearson_matches_closed_form() {
        // Sxy = 4.1, Sxx = 2, Syy = 25.22/3, so r = 4.1 * sqrt(3 / 50.44).
        // Reference value from 50-digit arithmetic: 0.999900867409917527...
        let r = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.1]).unwrap();
        assert!((r - 0.999_900_867_409_917_5).abs() < 1e-14);
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(RankVector::from_values(&[0.1, 0.5, 0.3], 1e-9).0, vec![2, 0, 1]);
        assert_eq!(RankVector::from_values(&[0.5, 0.5, 0.3], 1e-9).0, vec![0, 0, 1]);
        assert_eq!(RankVector::from_values(&[0.5, 0.5 + 1e-12, 0.3], 1e-9).0, vec![0, 0, 1]);
    }

    #[test]
    fn agreement_counts() {
        let truth = vec![vec![1.0; 10], vec![2.0; 10], vec![3.0; 10]];
        assert_eq!(rank_agreement_rate(&truth, &truth, 1e-9).unwrap(), 1.0);
        let neg: Vec<Vec<f64>> = truth.iter().map(|s| s.iter().map(|v| -v).collect()).collect();
        assert_eq!(rank_agreement_rate(&neg, &truth, 1e-9).unwrap(), 0.0);
        // Match on 7 of 10 intervals: swap agents 0 and 2 on the last three.
        let mut metric = truth.clone();
        for k in 7..10 {
            metric[0][k] = 3.0;
            metric[2][k] = 1.0;
        }
        assert!((rank_agreement_rate(&metric, &truth, 1e-9).unwrap() - 0.7).abs() < 1e-15);
        // Agent 1 keeps its middle rank throughout.
        assert_eq!(
            per_agent_rank_agreement(&metric, &truth, 1e-9).unwrap(),
            vec![0.7, 1.0, 0.7]
        );
    }

    #[test]
    fn iqm_and_median() {
        let xs: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(iqm(&xs), 4.5);
        assert_eq!(median(&xs), 4.5);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(iqm(&[7.0]), 7.0);
    }

    #[test]
    fn constant_scores_give_zero_width() {
        let m = matrix(vec![vec![0.4; 5], vec![0.4; 3]]);
        let agg = aggregate(&m, 200, &mut ChaCha8Rng::seed_from_u64(1));
        for (_, e) in agg.rows().iter().take(3) {
            for x in [e.value, e.ci_lo, e.ci_hi] {
                assert!((x - 0.4).abs() < 1e-15);
            }
            assert_eq!(e.ci_lo, e.ci_hi);
        }
        assert!((agg.optimality_gap.value - 0.6).abs() < 1e-15);
        assert_eq!(agg.optimality_gap.ci_lo, agg.optimality_gap.ci_hi);
    }

    #[test]
    fn gap_complements_mean() {
        let m = matrix(vec![vec![0.8, 0.9], vec![0.85, 0.85]]);
        let agg = aggregate(&m, 100, &mut ChaCha8Rng::seed_from_u64(2));
        assert!((agg.mean.value - 0.85).abs() < 1e-15);
        assert!((agg.optimality_gap.value - 0.15).abs() < 1e-15);
        assert!(agg.mean.ci_lo <= agg.mean.value && agg.mean.value <= agg.mean.ci_hi);
    }

    #[test]
    fn profiles() {
        let m = matrix(vec![vec![0.2, 0.6, 0.9]]);
        assert_eq!(performance_profile(&m, &[0.0, 0.5, 1.0]), vec![1.0, 2.0 / 3.0, 0.0]);
    }

    #[test]
    fn improvement_probability() {
        let x = matrix(vec![vec![1.0, 3.0]]);
        let y = matrix(vec![vec![2.0, 2.0]]);
        assert_eq!(probability_of_improvement(&x, &y).unwrap(), 0.5);
        assert_eq!(probability_of_improvement(&x, &x).unwrap(), 0.5);
        let low = matrix(vec![vec![0.0, 0.5]]);
        assert_eq!(probability_of_improvement(&x, &low).unwrap(), 1.0);
    }

    #[test]
    fn normalization_clamps() {
        let m = matrix(vec![vec![-1.0, 5.0, 10.0, 12.0]]);
        let n = m.normalized(&[Bounds { lo: 0.0, hi: 10.0 }]).unwrap();
        assert_eq!(n.scores[0], vec![0.0, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn absolute_metric_uses_best_snapshot() {
        let rec = |i, m, snap: Option<f64>| IntervalRecord {
            index: i,
            episode: 0,
            mean_return: m,
            std_error: 0.0,
            episodes: 4,
            snapshot: snap,
        };
        let curve = vec![rec(0, 0.2, None), rec(1, 0.7, Some(0.65)), rec(2, 0.5, None)];
        let mut asked = 0;
        let v = absolute_metric::<_, _, EvalError>(&curve, 10, |p, n| {
            asked = n;
            Ok(vec![*p; n])
        })
        .unwrap();
        assert!((v - 0.65).abs() < 1e-15);
        assert_eq!(asked, 40);
        let missing = vec![rec(0, 0.9, None), rec(1, 0.1, Some(0.1))];
        assert_eq!(
            absolute_metric::<_, _, EvalError>(&missing, 10, |p, n| Ok(vec![*p; n])),
            Err(EvalError::MissingSnapshot(0))
        );
    }

    #[test]
    fn variance_helpers() {
        assert_eq!(population_variance(&[0.0, 1.0]), 0.25);
        assert!((population_variance(&[1.0, 2.0, 3.0]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(population_variance(&[0.3, 0.3]), 0.0);
        let (m, se) = mean_and_std_error(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-15);
    }
}
