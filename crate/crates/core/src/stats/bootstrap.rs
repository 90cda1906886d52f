// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pair-clustered bootstrap.
//!
//! Clusters (prompt pairs) are resampled with replacement; the statistic is
//! recomputed on each resample and a percentile interval is read off the
//! sorted resample distribution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::normal::{normal_cdf, normal_quantile};
use super::{check_confidence, Interval, IntervalMethod};
use crate::error::{Error, Result};

/// Success count for one cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterCount {
    /// Successful trials.
    pub successes: u64,
    /// Total trials.
    pub n: u64,
}

impl ClusterCount {
    /// Construct a count.
    pub const fn new(successes: u64, n: u64) -> Self {
        Self { successes, n }
    }

    /// Success fraction.
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.n as f64
    }
}

/// A cluster count carrying the cluster id used to align two conditions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledCluster {
    /// Cluster (prompt pair) id.
    pub id: String,
    /// Counts for this cluster.
    pub count: ClusterCount,
}

/// Which statistic the bootstrap resamples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapStatistic {
    /// Equal-weight mean of per-cluster rates.
    #[default]
    MeanOfRates,
    /// Pooled successes over pooled trials.
    Pooled,
}

/// Percentile or bias-corrected-and-accelerated interval.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    /// Plain percentile interval.
    #[default]
    Percentile,
    /// BCa with jackknife acceleration over clusters.
    Bca,
}

/// Bootstrap settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// Number of resamples.
    pub resamples: usize,
    /// Confidence level.
    pub confidence: f64,
    /// RNG seed.
    pub seed: u64,
    /// Resampled statistic.
    #[serde(default)]
    pub statistic: BootstrapStatistic,
    /// Interval construction.
    #[serde(default)]
    pub kind: IntervalKind,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 10_000,
            confidence: super::DEFAULT_CONFIDENCE,
            seed: 0,
            statistic: BootstrapStatistic::MeanOfRates,
            kind: IntervalKind::Percentile,
        }
    }
}

impl BootstrapConfig {
    /// Defaults with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

fn statistic_of(clusters: &[ClusterCount], idx: &[usize], stat: BootstrapStatistic) -> f64 {
    match stat {
        BootstrapStatistic::MeanOfRates => {
            idx.iter().map(|&i| clusters[i].rate()).sum::<f64>() / idx.len() as f64
        }
        BootstrapStatistic::Pooled => {
            let (s, n) = idx.iter().fold((0u64, 0u64), |(s, n), &i| {
                (s + clusters[i].successes, n + clusters[i].n)
            });
            s as f64 / n as f64
        }
    }
}

/// Linear-interpolation quantile of sorted data (type 7).
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn validate_clusters(clusters: &[ClusterCount]) -> Result<()> {
    if clusters.is_empty() {
        return Err(Error::Stats("bootstrap needs at least one cluster".into()));
    }
    for (i, c) in clusters.iter().enumerate() {
        if c.n == 0 {
            return Err(Error::Stats(format!("cluster {i} has n = 0")));
        }
        if c.successes > c.n {
            return Err(Error::Stats(format!("cluster {i} has successes > n")));
        }
    }
    Ok(())
}

fn percentile_bounds(
    mut stats: Vec<f64>,
    point: f64,
    cfg: &BootstrapConfig,
    jackknife: impl Fn() -> Vec<f64>,
) -> (f64, f64) {
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - cfg.confidence) / 2.0;
    let (q_lo, q_hi) = match cfg.kind {
        IntervalKind::Percentile => (alpha, 1.0 - alpha),
        IntervalKind::Bca => {
            let below = stats.iter().filter(|&&s| s < point).count() as f64;
            let prop = below / stats.len() as f64;
            let jack = jackknife();
            let mean = jack.iter().sum::<f64>() / jack.len() as f64;
            let num: f64 = jack.iter().map(|j| (mean - j).powi(3)).sum();
            let den: f64 = jack.iter().map(|j| (mean - j).powi(2)).sum::<f64>().powf(1.5);
            if prop <= 0.0 || prop >= 1.0 || den == 0.0 {
                (alpha, 1.0 - alpha)
            } else {
                let z0 = normal_quantile(prop);
                let a = num / (6.0 * den);
                let adj = |za: f64| normal_cdf(z0 + (z0 + za) / (1.0 - a * (z0 + za)));
                (
                    adj(normal_quantile(alpha)),
                    adj(normal_quantile(1.0 - alpha)),
                )
            }
        }
    };
    (quantile_sorted(&stats, q_lo), quantile_sorted(&stats, q_hi))
}

/// Percentile interval for a clustered proportion.
///
/// Each resample draws `clusters.len()` clusters with replacement and
/// evaluates `cfg.statistic`. Deterministic for a fixed `cfg.seed`.
pub fn cluster_bootstrap(clusters: &[ClusterCount], cfg: &BootstrapConfig) -> Result<Interval> {
    validate_clusters(clusters)?;
    check_confidence(cfg.confidence)?;
    if cfg.resamples == 0 {
        return Err(Error::Stats("bootstrap needs at least one resample".into()));
    }
    let k = clusters.len();
    let all: Vec<usize> = (0..k).collect();
    let point = statistic_of(clusters, &all, cfg.statistic);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx = vec![0usize; k];
    let stats: Vec<f64> = (0..cfg.resamples)
        .map(|_| {
            for slot in idx.iter_mut() {
                *slot = rng.random_range(0..k);
            }
            statistic_of(clusters, &idx, cfg.statistic)
        })
        .collect();

    let jackknife = || {
        (0..k)
            .map(|drop| {
                let keep: Vec<usize> = (0..k).filter(|&i| i != drop).collect();
                if keep.is_empty() {
                    point
                } else {
                    statistic_of(clusters, &keep, cfg.statistic)
                }
            })
            .collect()
    };
    let (lower, upper) = percentile_bounds(stats, point, cfg, jackknife);
    Ok(finish(point, lower.max(0.0), upper.min(1.0), cfg, IntervalMethod::ClusterBootstrap))
}

fn finish(point: f64, lower: f64, upper: f64, cfg: &BootstrapConfig, method: IntervalMethod) -> Interval {
    // Resample statistics are averages of the same rates as the point
    // estimate, so a degenerate distribution can differ from it by rounding.
    let eps = 1e-12;
    Interval {
        point,
        lower,
        upper,
        confidence: cfg.confidence,
        method,
        n: cfg.resamples,
        seed: Some(cfg.seed),
        point_outside: point < lower - eps || point > upper + eps,
        conservative: false,
    }
}

/// Bootstrap interval on `rate(a) - rate(b)` where both conditions were
/// measured on the same clusters.
///
/// Every resample draws one index vector and applies it to both
/// conditions, preserving the pairing.
pub fn joint_cluster_bootstrap_diff(
    a: &[LabeledCluster],
    b: &[LabeledCluster],
    cfg: &BootstrapConfig,
) -> Result<Interval> {
    if a.len() != b.len() {
        return Err(Error::Stats(format!(
            "cluster count mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut a_sorted: Vec<&LabeledCluster> = a.iter().collect();
    let mut b_sorted: Vec<&LabeledCluster> = b.iter().collect();
    a_sorted.sort_by(|x, y| x.id.cmp(&y.id));
    b_sorted.sort_by(|x, y| x.id.cmp(&y.id));
    for (x, y) in a_sorted.iter().zip(&b_sorted) {
        if x.id != y.id {
            return Err(Error::Stats(format!(
                "cluster id mismatch: {} vs {}",
                x.id, y.id
            )));
        }
    }
    let ca: Vec<ClusterCount> = a_sorted.iter().map(|c| c.count).collect();
    let cb: Vec<ClusterCount> = b_sorted.iter().map(|c| c.count).collect();
    validate_clusters(&ca)?;
    validate_clusters(&cb)?;
    check_confidence(cfg.confidence)?;
    if cfg.resamples == 0 {
        return Err(Error::Stats("bootstrap needs at least one resample".into()));
    }

    let k = ca.len();
    let diff = |idx: &[usize]| {
        statistic_of(&ca, idx, cfg.statistic) - statistic_of(&cb, idx, cfg.statistic)
    };
    let all: Vec<usize> = (0..k).collect();
    let point = diff(&all);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx = vec![0usize; k];
    let stats: Vec<f64> = (0..cfg.resamples)
        .map(|_| {
            for slot in idx.iter_mut() {
                *slot = rng.random_range(0..k);
            }
            diff(&idx)
        })
        .collect();
    let jackknife = || {
        (0..k)
            .map(|drop| {
                let keep: Vec<usize> = (0..k).filter(|&i| i != drop).collect();
                if keep.is_empty() {
                    point
                } else {
                    diff(&keep)
                }
            })
            .collect()
    };
    let (lower, upper) = percentile_bounds(stats, point, cfg, jackknife);
    Ok(finish(
        point,
        lower.max(-1.0),
        upper.min(1.0),
        cfg,
        IntervalMethod::JointBootstrapDiff,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;

    fn counts(rates_over_20: &[u64]) -> Vec<ClusterCount> {
        rates_over_20.iter().map(|&s| ClusterCount::new(s, 20)).collect()
    }

    /// Exact bootstrap distribution by enumerating all k^k index vectors.
    fn exact_mean_distribution(rates: &[f64]) -> Vec<f64> {
        let k = rates.len();
        let total = k.pow(k as u32);
        (0..total)
            .map(|mut code| {
                let mut sum = 0.0;
                for _ in 0..k {
                    sum += rates[code % k];
                    code /= k;
                }
                sum / k as f64
            })
            .collect()
    }

    #[test]
    fn identical_clusters_give_zero_width() {
        let iv = cluster_bootstrap(&counts(&[10, 10, 10, 10, 10]), &BootstrapConfig::with_seed(1))
            .unwrap();
        assert_eq!((iv.lower, iv.point, iv.upper), (0.5, 0.5, 0.5));
        assert!(!iv.point_outside);
    }

    #[test]
    fn single_cluster_is_degenerate() {
        let iv = cluster_bootstrap(&counts(&[7]), &BootstrapConfig::with_seed(3)).unwrap();
        assert_eq!((iv.lower, iv.upper), (0.35, 0.35));
    }

    #[test]
    fn five_pair_case_matches_exact_enumeration() {
        // per-pair rates spanning 0.40..0.90 with mean 0.63
        let c = counts(&[8, 10, 13, 14, 18]);
        let rates: Vec<f64> = c.iter().map(ClusterCount::rate).collect();
        let mut exact = exact_mean_distribution(&rates);
        exact.sort_by(f64::total_cmp);
        let iv = cluster_bootstrap(&c, &BootstrapConfig::with_seed(11)).unwrap();
        assert!((iv.point - 0.63).abs() < 1e-12);
        assert!((iv.lower - quantile_sorted(&exact, 0.025)).abs() < 0.01);
        assert!((iv.upper - quantile_sorted(&exact, 0.975)).abs() < 0.01);
        assert!((iv.lower - 0.48).abs() <= 0.011, "lower {}", iv.lower);
        assert!((iv.upper - 0.78).abs() <= 0.011, "upper {}", iv.upper);
    }

    #[test]
    fn zero_trial_cluster_is_rejected() {
        let err = cluster_bootstrap(&[ClusterCount::new(0, 0)], &BootstrapConfig::default());
        assert!(err.is_err());
        assert!(cluster_bootstrap(&[], &BootstrapConfig::default()).is_err());
    }

    #[test]
    fn pooled_statistic_weights_by_trials() {
        let c = [ClusterCount::new(1, 1), ClusterCount::new(0, 9)];
        let cfg = BootstrapConfig {
            statistic: BootstrapStatistic::Pooled,
            ..BootstrapConfig::with_seed(0)
        };
        let iv = cluster_bootstrap(&c, &cfg).unwrap();
        assert!((iv.point - 0.1).abs() < 1e-12);
    }

    #[test]
    fn bca_reduces_to_valid_interval() {
        let c = counts(&[2, 5, 9, 15, 19, 11, 7]);
        let cfg = BootstrapConfig {
            kind: IntervalKind::Bca,
            ..BootstrapConfig::with_seed(5)
        };
        let iv = cluster_bootstrap(&c, &cfg).unwrap();
        assert!(iv.lower < iv.point && iv.point < iv.upper);
    }

    fn labeled(ids: &[&str], succ: &[u64]) -> Vec<LabeledCluster> {
        ids.iter()
            .zip(succ)
            .map(|(id, &s)| LabeledCluster {
                id: (*id).to_string(),
                count: ClusterCount::new(s, 20),
            })
            .collect()
    }

    #[test]
    fn joint_diff_of_equal_conditions_is_zero() {
        let a = labeled(&["p1", "p2", "p3"], &[3, 9, 17]);
        let iv = joint_cluster_bootstrap_diff(&a, &a, &BootstrapConfig::with_seed(2)).unwrap();
        assert_eq!((iv.lower, iv.point, iv.upper), (0.0, 0.0, 0.0));
    }

    #[test]
    fn joint_diff_extremes() {
        let a = labeled(&["p1", "p2"], &[20, 20]);
        let b = labeled(&["p2", "p1"], &[0, 0]);
        let iv = joint_cluster_bootstrap_diff(&a, &b, &BootstrapConfig::with_seed(2)).unwrap();
        assert_eq!((iv.lower, iv.upper), (1.0, 1.0));
    }

    #[test]
    fn joint_diff_rejects_mismatched_ids() {
        let a = labeled(&["p1", "p2"], &[1, 2]);
        let b = labeled(&["p1", "p3"], &[1, 2]);
        assert!(joint_cluster_bootstrap_diff(&a, &b, &BootstrapConfig::default()).is_err());
    }

    #[test]
    fn joint_diff_matches_exact_enumeration() {
        let a = labeled(&["a", "b", "c", "d"], &[4, 12, 15, 19]);
        let b = labeled(&["a", "b", "c", "d"], &[2, 3, 11, 6]);
        let d: Vec<f64> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| x.count.rate() - y.count.rate())
            .collect();
        let mut exact = exact_mean_distribution(&d);
        exact.sort_by(f64::total_cmp);
        let iv = joint_cluster_bootstrap_diff(&a, &b, &BootstrapConfig::with_seed(9)).unwrap();
        assert!((iv.lower - quantile_sorted(&exact, 0.025)).abs() < 0.01);
        assert!((iv.upper - quantile_sorted(&exact, 0.975)).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn deterministic_under_seed(succ in proptest::collection::vec(0u64..=20, 1..8), seed in any::<u64>()) {
            let c = counts(&succ);
            let cfg = BootstrapConfig { resamples: 500, ..BootstrapConfig::with_seed(seed) };
            prop_assert_eq!(cluster_bootstrap(&c, &cfg).unwrap(), cluster_bootstrap(&c, &cfg).unwrap());
        }

        #[test]
        fn unit_clusters_reduce_to_iid_bootstrap(outcomes in proptest::collection::vec(any::<bool>(), 1..30), seed in any::<u64>()) {
            let c: Vec<ClusterCount> = outcomes.iter().map(|&o| ClusterCount::new(u64::from(o), 1)).collect();
            let cfg = BootstrapConfig { resamples: 300, ..BootstrapConfig::with_seed(seed) };
            let clustered = cluster_bootstrap(&c, &cfg).unwrap();

            // i.i.d. bootstrap over individual Bernoulli outcomes
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = outcomes.len();
            let mut means: Vec<f64> = (0..300).map(|_| {
                (0..n).map(|_| f64::from(u8::from(outcomes[rng.random_range(0..n)]))).sum::<f64>() / n as f64
            }).collect();
            means.sort_by(f64::total_cmp);
            prop_assert!((clustered.lower - quantile_sorted(&means, 0.025).max(0.0)).abs() < 1e-12);
            prop_assert!((clustered.upper - quantile_sorted(&means, 0.975).min(1.0)).abs() < 1e-12);
        }

        #[test]
        fn permuting_clusters_keeps_point(succ in proptest::collection::vec(0u64..=20, 2..8)) {
            let c = counts(&succ);
            let mut r = c.clone();
            r.reverse();
            let cfg = BootstrapConfig { resamples: 100, ..BootstrapConfig::with_seed(0) };
            let x = cluster_bootstrap(&c, &cfg).unwrap();
            let y = cluster_bootstrap(&r, &cfg).unwrap();
            prop_assert!((x.point - y.point).abs() < 1e-12);
        }
    }
}
