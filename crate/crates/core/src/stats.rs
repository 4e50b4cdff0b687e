//! Rank statistics used by the round reports: Wilcoxon signed-rank test and
//! Spearman rank correlation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("degenerate sample: all differences are zero")]
    DegenerateSample,
    #[error("inputs differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} observations, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("input is constant")]
    Constant,
    #[error("input contains a non-finite value")]
    NonFinite,
}

/// Largest effective sample size for which the signed-rank p-value is
/// computed exactly.
pub const EXACT_THRESHOLD: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestMethod {
    Exact,
    NormalApproximation,
}

impl std::fmt::Display for TestMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TestMethod::Exact => "exact",
            TestMethod::NormalApproximation => "normal-approximation",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// min(W+, W-).
    pub statistic: f64,
    /// Two-sided, in (0, 1].
    pub p_value: f64,
    pub method: TestMethod,
    /// Pairs left after dropping zero differences.
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

struct SignedRanks {
    ranks: Vec<f64>,
    w_plus: f64,
}

fn signed_ranks(pairs: &[(f64, f64)]) -> Result<SignedRanks, StatsError> {
    if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(StatsError::DegenerateSample);
    }
    let magnitudes: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&magnitudes);
    let w_plus = ranks
        .iter()
        .zip(&diffs)
        .filter(|(_, d)| **d > 0.0)
        .map(|(r, _)| r)
        .sum();
    Ok(SignedRanks { ranks, w_plus })
}

fn exact_p(sr: &SignedRanks) -> f64 {
    // Average ranks are multiples of 1/2, so doubled ranks are integers and
    // the null distribution of 2*W+ is a subset-sum count.
    let doubled: Vec<usize> = sr.ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let observed = (sr.w_plus * 2.0).round() as usize;
    let all = 2f64.powi(doubled.len() as i32);
    let lower: u64 = counts[..=observed].iter().sum();
    let upper: u64 = counts[observed..].iter().sum();
    (2.0 * lower.min(upper) as f64 / all).min(1.0)
}

fn normal_p(sr: &SignedRanks) -> f64 {
    let n = sr.ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = sr.ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let variance = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if variance <= 0.0 {
        return 1.0;
    }
    let z = ((sr.w_plus - mean).abs() - 0.5).max(0.0) / variance.sqrt();
    let normal = Normal::standard();
    (2.0 * normal.sf(z)).clamp(f64::MIN_POSITIVE, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WilcoxonMethod {
    /// Exact up to [`EXACT_THRESHOLD`] pairs, normal approximation above.
    #[default]
    Auto,
    Exact,
    Normal,
}

/// Two-sided Wilcoxon signed-rank test on paired observations.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<TestResult, StatsError> {
    wilcoxon_signed_rank_with(pairs, WilcoxonMethod::Auto)
}

pub fn wilcoxon_signed_rank_with(
    pairs: &[(f64, f64)],
    method: WilcoxonMethod,
) -> Result<TestResult, StatsError> {
    let sr = signed_ranks(pairs)?;
    let n = sr.ranks.len();
    let total: f64 = sr.ranks.iter().sum();
    let statistic = sr.w_plus.min(total - sr.w_plus);
    let exact = match method {
        WilcoxonMethod::Auto => n <= EXACT_THRESHOLD,
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    let (p_value, method) = if exact {
        (exact_p(&sr), TestMethod::Exact)
    } else {
        (normal_p(&sr), TestMethod::NormalApproximation)
    };
    Ok(TestResult {
        statistic,
        p_value,
        method,
        n,
    })
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

fn check_correlation_input(x: &[f64], y: &[f64]) -> Result<(), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(StatsError::TooFew {
            needed: 3,
            got: x.len(),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let constant = |v: &[f64]| v.iter().all(|a| *a == v[0]);
    if constant(x) || constant(y) {
        return Err(StatsError::Constant);
    }
    Ok(())
}

/// Spearman's rho alone: the Pearson correlation of average ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    check_correlation_input(x, y)?;
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

/// Spearman's rho with a two-sided p-value from Student's t on n - 2
/// degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<CorrelationResult, StatsError> {
    let rho = spearman_rho(x, y)?;
    let n = x.len();
    let df = (n - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(CorrelationResult { rho, p_value, n })
}
