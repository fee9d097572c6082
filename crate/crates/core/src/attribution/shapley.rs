//! Exact Shapley weights and the permutation-enumeration cross-check.

use itertools::Itertools;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{coalition_value, AttributionError, CoalitionMask, RemovalProxy};
use crate::env::Environment;

/// Hard ceiling for exact Shapley; `n!` must fit in a `u128`.
pub const MAX_EXACT_AGENTS: usize = 30;

/// Ceiling for enumerating all `n!` orderings.
pub const MAX_PERMUTATION_AGENTS: usize = 9;

fn factorial(n: usize) -> u128 {
    (1..=n as u128)
        .try_fold(1u128, |acc, k| acc.checked_mul(k))
        .expect("factorial overflows u128")
}

/// `|C|! (n - |C| - 1)! / n!` for a coalition of size `k` not containing the
/// agent. The reciprocal `n! / (k! (n-k-1)!)` is an exact integer.
pub fn shapley_weight(n: usize, k: usize) -> f64 {
    assert!(k < n && n <= MAX_EXACT_AGENTS, "weight({n}, {k}) out of range");
    let denom = factorial(n) / (factorial(k) * factorial(n - k - 1));
    1.0 / denom as f64
}

/// Shapley values from `v[mask]` for every mask over `n` agents.
pub(super) fn combine(n: usize, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(v.len(), 1 << n);
    let weights: Vec<f64> = (0..n).map(|k| shapley_weight(n, k)).collect();
    (0..n)
        .map(|i| {
            let bit = 1usize << i;
            let mut by_size = vec![0.0; n];
            for mask in 0..v.len() {
                if mask & bit == 0 {
                    by_size[mask.count_ones() as usize] += v[mask | bit] - v[mask];
                }
            }
            by_size.iter().zip(&weights).map(|(s, w)| s * w).sum()
        })
        .collect()
}

/// Shapley values as the average marginal contribution over all `n!`
/// orderings, under the no-op proxy. Each coalition is evaluated at most once.
pub fn shapley_by_permutations<E: Environment>(
    env: &E,
    state: &E::State,
    joint: &[E::Action],
) -> Result<Vec<f64>, AttributionError> {
    let n = env.n_agents();
    if n > MAX_PERMUTATION_AGENTS {
        return Err(AttributionError::TooManyAgents {
            n,
            cap: MAX_PERMUTATION_AGENTS,
        });
    }
    let mut cache: Vec<Option<f64>> = vec![None; 1 << n];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut value = |mask: CoalitionMask| -> Result<f64, AttributionError> {
        if let Some(v) = cache[mask.0 as usize] {
            return Ok(v);
        }
        let v = coalition_value(env, state, joint, mask, RemovalProxy::NoOp, &mut rng)?;
        cache[mask.0 as usize] = Some(v);
        Ok(v)
    };
    let mut sums = vec![0.0; n];
    let mut orderings = 0u64;
    for order in (0..n).permutations(n) {
        let mut prefix = CoalitionMask::empty();
        let mut before = value(prefix)?;
        for &i in &order {
            prefix = prefix.with(i);
            let after = value(prefix)?;
            sums[i] += after - before;
            before = after;
        }
        orderings += 1;
    }
    Ok(sums.iter().map(|s| s / orderings as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_match_closed_form() {
        assert_eq!(shapley_weight(1, 0), 1.0);
        assert_eq!(shapley_weight(2, 0), 0.5);
        assert_eq!(shapley_weight(3, 0), 1.0 / 3.0);
        assert_eq!(shapley_weight(3, 1), 1.0 / 6.0);
        assert_eq!(shapley_weight(20, 10), 1.0 / (20.0 * 92378.0));
    }

    #[test]
    fn weights_sum_to_one_over_subsets() {
        // sum_k C(n-1, k) w(n, k) = 1
        for n in 1..=MAX_EXACT_AGENTS {
            let mut binom = 1.0f64;
            let mut total = 0.0;
            for k in 0..n {
                total += binom * shapley_weight(n, k);
                binom = binom * (n - 1 - k) as f64 / (k + 1) as f64;
            }
            assert!((total - 1.0).abs() < 1e-12, "n={n} total={total}");
        }
    }

    #[test]
    fn combine_glove_game() {
        // v = 1 iff agent 0 and at least one of 1, 2 are present.
        let v: Vec<f64> = (0..8)
            .map(|m| if m & 1 == 1 && m & 6 != 0 { 1.0 } else { 0.0 })
            .collect();
        let s = combine(3, &v);
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s[1] - 1.0 / 6.0).abs() < 1e-15);
        assert!((s[2] - 1.0 / 6.0).abs() < 1e-15);
    }
}
