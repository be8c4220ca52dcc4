//! Two-sided Mann-Whitney U test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::{Error, Result};

/// Largest combined sample size evaluated with the exact null distribution.
pub const EXACT_LIMIT: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Midranks (1-based) of the pooled sample, doubled so they are integers.
fn doubled_midranks(pooled: &[f64]) -> Vec<u64> {
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut out = vec![0u64; pooled.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && pooled[idx[j + 1]] == pooled[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean; doubled: (i+1)+(j+1).
        let r2 = (i + j + 2) as u64;
        for &k in &idx[i..=j] {
            out[k] = r2;
        }
        i = j + 1;
    }
    out
}

fn validate(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Eval("Mann-Whitney needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("Mann-Whitney sample".into()));
    }
    Ok(())
}

fn u_statistic(ranks2: &[u64], na: usize) -> f64 {
    let r_a: u64 = ranks2[..na].iter().sum();
    r_a as f64 / 2.0 - (na * (na + 1)) as f64 / 2.0
}

/// Exact p-value under the permutation null (ties handled through midranks).
pub fn mann_whitney_exact(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    validate(a, b)?;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = doubled_midranks(&pooled);
    let (na, n) = (a.len(), pooled.len());
    let max_sum: u64 = ranks.iter().sum();
    // counts[k][s]: subsets of size k with doubled-rank sum s.
    let mut counts = vec![vec![0f64; max_sum as usize + 1]; na + 1];
    counts[0][0] = 1.0;
    for &r in &ranks {
        for k in (1..=na).rev() {
            let (lo, hi) = counts.split_at_mut(k);
            let (prev, cur) = (&lo[k - 1], &mut hi[0]);
            for s in (r as usize..=max_sum as usize).rev() {
                cur[s] += prev[s - r as usize];
            }
        }
    }
    let observed: u64 = ranks[..na].iter().sum();
    // Mean of the doubled rank sum is na·(n+1), an integer.
    let mean = (na * (n + 1)) as i64;
    let dist = (observed as i64 - mean).abs();
    let total: f64 = counts[na].iter().sum();
    let extreme: f64 = counts[na]
        .iter()
        .enumerate()
        .filter(|&(s, _)| (s as i64 - mean).abs() >= dist)
        .map(|(_, c)| c)
        .sum();
    Ok(MannWhitney {
        u: u_statistic(&ranks, na),
        p_value: (extreme / total).min(1.0),
        exact: true,
    })
}

/// Normal approximation with tie and continuity corrections.
pub fn mann_whitney_normal(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    validate(a, b)?;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = doubled_midranks(&pooled);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let u = u_statistic(&ranks, a.len());
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&x| x == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let mu = na * nb / 2.0;
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * (1.0 - normal.cdf(z))).min(1.0)
    };
    Ok(MannWhitney { u, p_value: p, exact: false })
}

/// Exact for combined sizes up to [`EXACT_LIMIT`], normal approximation beyond.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.len() + b.len() <= EXACT_LIMIT {
        mann_whitney_exact(a, b)
    } else {
        mann_whitney_normal(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Enumerates every assignment of pooled midranks to the first sample.
    fn brute_force_p(a: &[f64], b: &[f64]) -> f64 {
        let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
        let n = pooled.len();
        let rank = |x: f64| {
            let below = pooled.iter().filter(|&&y| y < x).count() as f64;
            let equal = pooled.iter().filter(|&&y| y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        };
        let ranks: Vec<f64> = pooled.iter().map(|&x| rank(x)).collect();
        let mean = a.len() as f64 * (n as f64 + 1.0) / 2.0;
        let obs = (ranks[..a.len()].iter().sum::<f64>() - mean).abs();
        let (mut hit, mut total) = (0u64, 0u64);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != a.len() {
                continue;
            }
            total += 1;
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if (s - mean).abs() >= obs - 1e-9 {
                hit += 1;
            }
        }
        hit as f64 / total as f64
    }

    #[test]
    fn separated_triplets() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert!(r.exact);
        assert!((r.p_value - 0.1).abs() < 1e-15);
    }

    #[test]
    fn identical_samples_give_one() {
        let r = mann_whitney_u(&[0.37, 0.37, 0.37], &[0.37, 0.37, 0.37]).unwrap();
        assert_eq!(r.p_value, 1.0);
        let r = mann_whitney_u(&[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn exact_matches_enumeration_with_ties() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..60 {
            let na = rng.random_range(1..7);
            let nb = rng.random_range(1..7);
            let draw = |rng: &mut rand_chacha::ChaCha8Rng, k| (0..k).map(|_| rng.random_range(0..5) as f64).collect::<Vec<_>>();
            let a = draw(&mut rng, na);
            let b = draw(&mut rng, nb);
            let p = mann_whitney_exact(&a, &b).unwrap().p_value;
            assert!((p - brute_force_p(&a, &b)).abs() < 1e-12, "{a:?} {b:?}");
        }
    }

    #[test]
    fn exact_and_normal_agree_at_the_boundary() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for shift in [0.0, 0.3, 0.6, 1.0] {
            let a: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1.0) + shift).collect();
            let e = mann_whitney_exact(&a, &b).unwrap().p_value;
            let n = mann_whitney_normal(&a, &b).unwrap().p_value;
            assert!((e - n).abs() <= 0.01, "shift {shift}: exact {e} normal {n}");
        }
        let big = mann_whitney_u(&[1.0; 15], &[2.0; 15]).unwrap();
        assert!(!big.exact);
    }

    #[test]
    fn empty_samples_are_rejected() {
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }
}
