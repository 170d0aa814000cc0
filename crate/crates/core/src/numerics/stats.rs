//! Quantiles, moments and the two goodness-of-fit tests used by the
//! verification suites.

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Nearest-rank quantile: the `k`-th smallest value with `k = ceil(q * n)`.
///
/// The result is always an element of `values`. A `1e-9` slack absorbs the
/// binary representation error of `q` (`0.95 * 10000` must give rank 9500).
pub fn quantile_nearest_rank(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptySet);
    }
    assert!(q > 0.0 && q <= 1.0, "quantile level {q} outside (0, 1]");
    let n = values.len();
    let k = ((q * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut sorted = values.to_vec();
    let (_, kth, _) = sorted.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

/// Mean and population variance (divides by `n`).
pub fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

#[derive(Debug, Clone, Copy)]
pub struct KsResult {
    pub statistic: f64,
    pub critical: f64,
}

impl KsResult {
    pub fn rejects(&self) -> bool {
        self.statistic > self.critical
    }
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic critical value
/// `c(alpha) * sqrt((n + m) / (n m))`, `c(alpha) = sqrt(-ln(alpha / 2) / 2)`.
pub fn ks_two_sample(a: &[f64], b: &[f64], alpha: f64) -> KsResult {
    assert!(!a.is_empty() && !b.is_empty());
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    KsResult {
        statistic: d,
        critical: c * ((n + m) / (n * m)).sqrt(),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson chi-square test of `counts` against equal expected frequencies.
pub fn chi_square_uniform(counts: &[u64]) -> ChiSquareResult {
    assert!(counts.len() >= 2);
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let statistic = counts
        .iter()
        .map(|&c| {
            let diff = c as f64 - expected;
            diff * diff / expected
        })
        .sum::<f64>();
    let dof = counts.len() - 1;
    let dist = ChiSquared::new(dof as f64).expect("positive degrees of freedom");
    ChiSquareResult {
        statistic,
        dof,
        p_value: 1.0 - dist.cdf(statistic),
    }
}
