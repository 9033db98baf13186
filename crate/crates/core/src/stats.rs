//! Rank statistics: Kendall's tau between label rankings, the two-sample
//! Kruskal-Wallis H test, and mean-rank aggregation of several orderings.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::interp::LabelRanking;

/// Significance level used when comparing activation-difference distributions.
pub const DEFAULT_SIGNIFICANCE: f32 = 0.05;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("rankings do not cover the same items")]
    ItemMismatch,
    #[error("ranking contains a duplicate item")]
    DuplicateItem,
    #[error("sample is empty")]
    EmptySample,
    #[error("need at least 3 observations in total, got {0}")]
    TooFewObservations(usize),
    #[error("no rankings to aggregate")]
    NoRankings,
}

/// Kendall tau-a between two orderings of the same items.
///
/// Orders are lists of item ids, best first. Rankings here are strict total
/// orders, so no tie correction is applied.
pub fn kendall_tau_orders(a: &[usize], b: &[usize]) -> Result<f64, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::ItemMismatch);
    }
    let n = a.len();
    let max_id = a.iter().chain(b).copied().max().unwrap_or(0);
    let mut pos_a = vec![usize::MAX; max_id + 1];
    let mut pos_b = vec![usize::MAX; max_id + 1];
    for (p, &item) in a.iter().enumerate() {
        if pos_a[item] != usize::MAX {
            return Err(StatsError::DuplicateItem);
        }
        pos_a[item] = p;
    }
    for (p, &item) in b.iter().enumerate() {
        if pos_b[item] != usize::MAX {
            return Err(StatsError::DuplicateItem);
        }
        if pos_a[item] == usize::MAX {
            return Err(StatsError::ItemMismatch);
        }
        pos_b[item] = p;
    }
    if n < 2 {
        return Ok(1.0);
    }
    // Walk items in a's order; count pairs whose order in b agrees.
    let in_b: Vec<usize> = a.iter().map(|&item| pos_b[item]).collect();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            if in_b[i] < in_b[j] {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok((concordant - discordant) as f64 / pairs)
}

pub fn kendall_tau(a: &LabelRanking, b: &LabelRanking) -> Result<f32, StatsError> {
    kendall_tau_orders(&a.order, &b.order).map(|t| t as f32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KwResult {
    pub h_statistic: f32,
    pub p_value: f32,
    pub groups: usize,
}

/// Complementary error function, fractional error below 1.2e-7.
pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98
                                + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
    let ans = t * poly.exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// Survival function of the chi-square distribution with one degree of
/// freedom: `P(X > h) = erfc(sqrt(h / 2))`.
pub fn chi2_sf_df1(h: f64) -> f64 {
    if h <= 0.0 {
        return 1.0;
    }
    erfc((h / 2.0).sqrt()).clamp(0.0, 1.0)
}

/// Midranks (1-based) of `values`, ties receiving their average rank.
/// Returns ranks in input order and the tie-correction sum `Σ(t³ - t)`.
fn midranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    (ranks, ties)
}

/// Two-sample Kruskal-Wallis test with tie correction and a chi-square (df 1)
/// p-value.
pub fn kruskal_wallis(sample_a: &[f32], sample_b: &[f32]) -> Result<KwResult, StatsError> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let n_total = sample_a.len() + sample_b.len();
    if n_total < 3 {
        return Err(StatsError::TooFewObservations(n_total));
    }
    let joined: Vec<f64> = sample_a
        .iter()
        .chain(sample_b)
        .map(|&v| f64::from(v))
        .collect();
    let (ranks, ties) = midranks(&joined);
    let n = n_total as f64;
    let (na, nb) = (sample_a.len() as f64, sample_b.len() as f64);
    let ra: f64 = ranks[..sample_a.len()].iter().sum();
    let rb: f64 = ranks[sample_a.len()..].iter().sum();
    let h_raw = 12.0 / (n * (n + 1.0)) * (ra * ra / na + rb * rb / nb) - 3.0 * (n + 1.0);
    let correction = 1.0 - ties / (n * n * n - n);
    let h = if correction <= f64::EPSILON {
        0.0
    } else {
        (h_raw / correction).max(0.0)
    };
    Ok(KwResult {
        h_statistic: h as f32,
        p_value: chi2_sf_df1(h) as f32,
        groups: 2,
    })
}

/// Items ordered by mean rank across several orderings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAggregate<T> {
    /// `(item, mean 1-based rank)`, ascending by mean rank then item.
    pub items: Vec<(T, f64)>,
}

impl<T: Clone> RankAggregate<T> {
    pub fn order(&self) -> Vec<T> {
        self.items.iter().map(|(t, _)| t.clone()).collect()
    }
}

/// Mean-rank (Borda) combination of orderings over a common item set.
pub fn aggregate_ranks<T: Ord + Clone>(
    rankings: &[Vec<T>],
) -> Result<RankAggregate<T>, StatsError> {
    let first = rankings.first().ok_or(StatsError::NoRankings)?;
    let reference: BTreeSet<&T> = first.iter().collect();
    if reference.len() != first.len() {
        return Err(StatsError::DuplicateItem);
    }
    let mut totals: BTreeMap<T, f64> = first.iter().map(|t| (t.clone(), 0.0)).collect();
    for r in rankings {
        if r.len() != first.len() {
            return Err(StatsError::ItemMismatch);
        }
        let mut seen = BTreeSet::new();
        for (pos, item) in r.iter().enumerate() {
            if !seen.insert(item) {
                return Err(StatsError::DuplicateItem);
            }
            *totals.get_mut(item).ok_or(StatsError::ItemMismatch)? += (pos + 1) as f64;
        }
    }
    let k = rankings.len() as f64;
    let mut items: Vec<(T, f64)> = totals.into_iter().map(|(t, s)| (t, s / k)).collect();
    items.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(RankAggregate { items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    /// Pair enumeration straight from the definition.
    fn tau_oracle(a: &[usize], b: &[usize]) -> f64 {
        let pos = |o: &[usize], item: usize| o.iter().position(|&x| x == item).unwrap();
        let n = a.len();
        let mut s = 0i64;
        for i in 0..n {
            for j in i + 1..n {
                let da = pos(a, i) as i64 - pos(a, j) as i64;
                let db = pos(b, i) as i64 - pos(b, j) as i64;
                s += (da * db).signum();
            }
        }
        s as f64 / (n * (n - 1) / 2) as f64
    }

    /// H from explicit ranks, no ties.
    fn h_oracle(a: &[f32], b: &[f32]) -> f64 {
        let all: Vec<f32> = a.iter().chain(b).copied().collect();
        let rank = |v: f32| 1.0 + all.iter().filter(|&&w| w < v).count() as f64;
        let n = all.len() as f64;
        let mean = (n + 1.0) / 2.0;
        let group = |g: &[f32]| {
            let rbar = g.iter().map(|&v| rank(v)).sum::<f64>() / g.len() as f64;
            g.len() as f64 * (rbar - mean).powi(2)
        };
        12.0 / (n * (n + 1.0)) * (group(a) + group(b))
    }

    #[test]
    fn tau_examples() {
        let id = [0, 1, 2, 3, 4];
        let rev = [4, 3, 2, 1, 0];
        assert_eq!(kendall_tau_orders(&id, &id).unwrap(), 1.0);
        assert_eq!(kendall_tau_orders(&id, &rev).unwrap(), -1.0);
        let t = kendall_tau_orders(&[0, 1, 2, 3], &[0, 2, 1, 3]).unwrap();
        assert!((t - tau_oracle(&[0, 1, 2, 3], &[0, 2, 1, 3])).abs() < 1e-12);
        assert!((t - 4.0 / 6.0).abs() < 1e-6);
    }

    #[test]
    fn tau_rejects_mismatched_items() {
        assert_eq!(
            kendall_tau_orders(&[0, 1], &[0, 2]),
            Err(StatsError::ItemMismatch)
        );
        assert_eq!(
            kendall_tau_orders(&[0, 1], &[0, 1, 2]),
            Err(StatsError::ItemMismatch)
        );
        assert_eq!(
            kendall_tau_orders(&[0, 0], &[0, 1]),
            Err(StatsError::DuplicateItem)
        );
    }

    #[test]
    fn kw_examples() {
        let r = kruskal_wallis(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.h_statistic, 0.0);
        assert_eq!(r.p_value, 1.0);

        let r = kruskal_wallis(&[1.0, 2.0, 3.0], &[10.0, 11.0, 12.0]).unwrap();
        assert!((r.h_statistic - 3.857).abs() < 0.01, "{r:?}");
        assert!(
            (f64::from(r.h_statistic) - h_oracle(&[1.0, 2.0, 3.0], &[10.0, 11.0, 12.0])).abs()
                < 1e-5
        );
        assert!((r.p_value - 0.0495).abs() < 5e-4, "{r:?}");
        assert!(r.p_value < DEFAULT_SIGNIFICANCE);

        let r = kruskal_wallis(&[5.0, 5.0], &[5.0, 5.0]).unwrap();
        assert_eq!(r.h_statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn kw_errors() {
        assert_eq!(
            kruskal_wallis(&[], &[1.0, 2.0]),
            Err(StatsError::EmptySample)
        );
        assert_eq!(
            kruskal_wallis(&[1.0], &[2.0]),
            Err(StatsError::TooFewObservations(2))
        );
    }

    #[test]
    fn chi2_survival_matches_statrs() {
        let chi = ChiSquared::new(1.0).unwrap();
        for h in [0.01, 0.1, 0.5, 1.0, 2.0, 3.841_458_8, 5.0, 10.0, 20.0] {
            let ours = chi2_sf_df1(h);
            let theirs = 1.0 - chi.cdf(h);
            assert!(
                (ours - theirs).abs() < 2e-7 * theirs.max(1e-3),
                "h={h}: {ours} vs {theirs}"
            );
        }
        assert!((chi2_sf_df1(3.841_458_8) - 0.05).abs() < 1e-6);
    }

    #[test]
    fn aggregate_examples() {
        let single = aggregate_ranks(&[vec!["A", "B", "C"]]).unwrap();
        assert_eq!(single.order(), vec!["A", "B", "C"]);
        let sym = aggregate_ranks(&[vec!["A", "B", "C"], vec!["C", "B", "A"]]).unwrap();
        assert_eq!(sym.order(), vec!["A", "B", "C"]);
        assert!(sym.items.iter().all(|(_, m)| *m == 2.0));
        assert_eq!(
            aggregate_ranks(&[vec![1, 2], vec![1, 3]]),
            Err(StatsError::ItemMismatch)
        );
        assert_eq!(aggregate_ranks::<u8>(&[]), Err(StatsError::NoRankings));
    }

    #[test]
    fn aggregate_matches_mean_rank_table() {
        let runs = vec![
            vec!['w', 'x', 'y', 'z'],
            vec!['x', 'w', 'z', 'y'],
            vec!['z', 'x', 'w', 'y'],
        ];
        // Brute force: position table averaged per item.
        let mut table: Vec<(char, f64)> = ['w', 'x', 'y', 'z']
            .iter()
            .map(|&c| {
                let s: usize = runs
                    .iter()
                    .map(|r| r.iter().position(|&x| x == c).unwrap() + 1)
                    .sum();
                (c, s as f64 / 3.0)
            })
            .collect();
        table.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        let agg = aggregate_ranks(&runs).unwrap();
        assert_eq!(agg.items, table);
        assert_eq!(agg.order(), vec!['x', 'w', 'z', 'y']);
    }

    fn perm(n: usize) -> impl Strategy<Value = Vec<usize>> {
        Just((0..n).collect::<Vec<_>>()).prop_shuffle()
    }

    proptest! {
        #[test]
        fn tau_symmetric_and_permutation_invariant(
            (a, b, p) in (2usize..9).prop_flat_map(|n| (perm(n), perm(n), perm(n)))
        ) {
            let t = kendall_tau_orders(&a, &b).unwrap();
            prop_assert_eq!(t, kendall_tau_orders(&b, &a).unwrap());
            prop_assert_eq!(kendall_tau_orders(&a, &a).unwrap(), 1.0);
            prop_assert!((t - tau_oracle(&a, &b)).abs() < 1e-12);
            // Relabel items by the same permutation in both orderings.
            let ra: Vec<usize> = a.iter().map(|&i| p[i]).collect();
            let rb: Vec<usize> = b.iter().map(|&i| p[i]).collect();
            prop_assert_eq!(t, kendall_tau_orders(&ra, &rb).unwrap());
        }

        #[test]
        fn kw_symmetric_and_shift_invariant(
            a in prop::collection::vec(-100i32..100, 1..20),
            b in prop::collection::vec(-100i32..100, 2..20),
            shift in -50i32..50,
        ) {
            let fa: Vec<f32> = a.iter().map(|&v| v as f32).collect();
            let fb: Vec<f32> = b.iter().map(|&v| v as f32).collect();
            let ab = kruskal_wallis(&fa, &fb).unwrap();
            let ba = kruskal_wallis(&fb, &fa).unwrap();
            prop_assert!((ab.h_statistic - ba.h_statistic).abs() < 1e-4);
            let sa: Vec<f32> = fa.iter().map(|v| v + shift as f32).collect();
            let sb: Vec<f32> = fb.iter().map(|v| v + shift as f32).collect();
            let shifted = kruskal_wallis(&sa, &sb).unwrap();
            prop_assert_eq!(ab.h_statistic, shifted.h_statistic);
            prop_assert!((0.0..=1.0).contains(&ab.p_value));
        }

        #[test]
        fn kw_matches_rank_oracle_without_ties(
            (vals, split) in (3usize..=8).prop_flat_map(|n| (
                Just((0..n).map(|i| i as f32 * 1.5 - 4.0).collect::<Vec<f32>>()).prop_shuffle(),
                1..n,
            ))
        ) {
            let (a, b) = vals.split_at(split);
            let h = kruskal_wallis(a, b).unwrap().h_statistic;
            prop_assert!((f64::from(h) - h_oracle(a, b)).abs() < 1e-6 * h_oracle(a, b).max(1.0));
        }

        #[test]
        fn p_value_decreases_with_h(h1 in 0.0f64..30.0, dh in 0.0f64..10.0) {
            prop_assert!(chi2_sf_df1(h1 + dh) <= chi2_sf_df1(h1));
        }
    }
}
