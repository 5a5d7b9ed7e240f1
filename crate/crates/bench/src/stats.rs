//! One-sided Wilcoxon signed-rank test and a Kolmogorov-Smirnov distance to
//! the uniform distribution.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest number of non-zero differences handled by exact enumeration.
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("samples have different lengths ({0} and {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 5 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("every paired difference is zero; the test is undefined")]
    AllZero,
    #[error("samples contain a non-finite value")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of the ranks of positive differences.
    pub statistic: f64,
    /// Pairs with a non-zero difference.
    pub n: usize,
    pub p_value: f64,
    pub exact: bool,
}

/// Tests `a − b` for a positive shift (alternative "greater"). Zero
/// differences are dropped; tied magnitudes get average ranks. The null
/// distribution is enumerated exactly for up to [`EXACT_MAX_N`] non-zero
/// differences, otherwise approximated by a normal with tie correction.
pub fn wilcoxon_one_sided(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 5 {
        return Err(StatsError::TooFewPairs(a.len()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(StatsError::AllZero);
    }
    diffs.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let n = diffs.len();

    // Doubled average ranks are integers: a tie block over positions i..j
    // (1-based) has doubled rank i + j.
    let mut ranks2 = vec![0usize; n];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[j + 1].abs() == diffs[i].abs() {
            j += 1;
        }
        ranks2[i..=j].iter_mut().for_each(|r| *r = (i + 1) + (j + 1));
        tie_sizes.push(j - i + 1);
        i = j + 1;
    }
    let w2: usize = diffs.iter().zip(&ranks2).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let statistic = w2 as f64 / 2.0;

    if n <= EXACT_MAX_N {
        let total: usize = ranks2.iter().sum();
        // counts[s] = number of sign assignments with doubled positive-rank sum s.
        let mut counts = vec![0.0f64; total + 1];
        counts[0] = 1.0;
        let mut reach = 0;
        for &r in &ranks2 {
            for s in (0..=reach).rev() {
                if counts[s] != 0.0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let upper: f64 = counts[w2..].iter().sum();
        let p_value = upper / 2f64.powi(n as i32);
        return Ok(WilcoxonResult {
            statistic,
            n,
            p_value: p_value.min(1.0),
            exact: true,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = tie_sizes.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let z = (statistic - mean) / var.sqrt();
    Ok(WilcoxonResult {
        statistic,
        n,
        p_value: 0.5 * libm::erfc(z / std::f64::consts::SQRT_2),
        exact: false,
    })
}

/// `sup_u |F_n(u) − u|` for a sample on `[0, 1]`.
pub fn ks_uniform_distance(sample: &[f64]) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &u)| ((i + 1) as f64 / n - u).max(u - i as f64 / n))
        .fold(0.0, f64::max)
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// Linear-interpolation quantile of a non-empty sample.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    assert!(!xs.is_empty(), "quantile of an empty sample");
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}
