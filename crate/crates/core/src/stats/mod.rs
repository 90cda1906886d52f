// SPDX-License-Identifier: MIT OR Apache-2.0

//! Uncertainty quantification: Wilson score intervals, pair-clustered
//! bootstrap (single condition and joint differences) and the paired
//! Wald approximation for accuracy gaps.

mod bootstrap;
mod normal;

pub use bootstrap::{
    cluster_bootstrap, joint_cluster_bootstrap_diff, BootstrapConfig, BootstrapStatistic,
    ClusterCount, IntervalKind, LabeledCluster,
};
pub use normal::{normal_cdf, normal_quantile, two_sided_z};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default confidence level for every reported interval.
pub const DEFAULT_CONFIDENCE: f64 = 0.95;

/// How an interval was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    /// Wilson score interval for a binomial proportion.
    Wilson,
    /// Percentile (or BCa) bootstrap over clusters.
    ClusterBootstrap,
    /// Bootstrap of a difference with shared cluster indices.
    JointBootstrapDiff,
    /// Unpooled Wald interval on a difference of proportions.
    PairedWald,
}

/// A point estimate with a two-sided confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    /// Point estimate.
    pub point: f64,
    /// Lower bound.
    pub lower: f64,
    /// Upper bound.
    pub upper: f64,
    /// Confidence level, e.g. 0.95.
    pub confidence: f64,
    /// Method tag.
    pub method: IntervalMethod,
    /// Sample size for analytic intervals, resample count for bootstraps.
    pub n: usize,
    /// RNG seed for stochastic methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Set when a percentile interval does not contain its point estimate.
    #[serde(default)]
    pub point_outside: bool,
    /// Set for intervals known to be conservative (independence assumed).
    #[serde(default)]
    pub conservative: bool,
}

impl Interval {
    /// Upper minus lower.
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    /// Whether `x` lies inside the closed interval.
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    /// Bounds rounded to whole percent, as printed in summary tables.
    pub fn percent_bounds(&self) -> (i64, i64) {
        (
            (self.lower * 100.0).round() as i64,
            (self.upper * 100.0).round() as i64,
        )
    }
}

fn check_confidence(confidence: f64) -> Result<()> {
    if confidence > 0.0 && confidence < 1.0 {
        Ok(())
    } else {
        Err(Error::Stats(format!(
            "confidence must lie in (0, 1), got {confidence}"
        )))
    }
}

/// Wilson score interval for `successes` out of `n` trials.
pub fn wilson(successes: u64, n: u64, confidence: f64) -> Result<Interval> {
    if n == 0 {
        return Err(Error::Stats("wilson interval needs n >= 1".into()));
    }
    if successes > n {
        return Err(Error::Stats(format!(
            "successes ({successes}) exceed trials ({n})"
        )));
    }
    check_confidence(confidence)?;
    let z = two_sided_z(confidence);
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    // Exact endpoints at the boundaries keep the reflection symmetry exact.
    let lower = if successes == 0 {
        0.0
    } else {
        (center - half).max(0.0)
    };
    let upper = if successes == n {
        1.0
    } else {
        (center + half).min(1.0)
    };
    Ok(Interval {
        point: p,
        lower,
        upper,
        confidence,
        method: IntervalMethod::Wilson,
        n: n as usize,
        seed: None,
        point_outside: false,
        conservative: false,
    })
}

/// Wald interval on `p1 - p2` treating the two proportions as independent.
///
/// When both proportions were measured on the same items the true paired
/// interval is narrower, so the result is tagged `conservative`.
pub fn paired_wald_diff(p1: f64, n1: u64, p2: f64, n2: u64, confidence: f64) -> Result<Interval> {
    if n1 == 0 || n2 == 0 {
        return Err(Error::Stats("paired Wald interval needs n1, n2 >= 1".into()));
    }
    for p in [p1, p2] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Stats(format!("proportion {p} outside [0, 1]")));
        }
    }
    check_confidence(confidence)?;
    let z = two_sided_z(confidence);
    let diff = p1 - p2;
    let se = (p1 * (1.0 - p1) / n1 as f64 + p2 * (1.0 - p2) / n2 as f64).sqrt();
    Ok(Interval {
        point: diff,
        lower: (diff - z * se).max(-1.0),
        upper: (diff + z * se).min(1.0),
        confidence,
        method: IntervalMethod::PairedWald,
        n: n1.min(n2) as usize,
        seed: None,
        point_outside: false,
        conservative: true,
    })
}

/// Exact paired interval on the difference of two accuracies measured on
/// the same items, from per-item correctness.
///
/// Uses the Wald form on the mean of per-item differences, which accounts
/// for the correlation the unpaired formula ignores.
pub fn paired_bitmap_diff(a: &[bool], b: &[bool], confidence: f64) -> Result<Interval> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Stats(format!(
            "paired correctness vectors must be nonempty and equal length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    check_confidence(confidence)?;
    let n = a.len() as f64;
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(u8::from(x)) - f64::from(u8::from(y)))
        .collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    let half = two_sided_z(confidence) * (var / n).sqrt();
    Ok(Interval {
        point: mean,
        lower: (mean - half).max(-1.0),
        upper: (mean + half).min(1.0),
        confidence,
        method: IntervalMethod::PairedWald,
        n: a.len(),
        seed: None,
        point_outside: false,
        conservative: false,
    })
}
