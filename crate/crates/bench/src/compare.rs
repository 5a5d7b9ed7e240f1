//! Seed-paired comparison of optimizer traces.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{median, quantile, wilcoxon_one_sided};
use crate::trace::RunTrace;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompareError {
    #[error("need at least two algorithms, got {0}")]
    TooFewAlgorithms(usize),
    #[error("`{label}` has no traces")]
    NoTraces { label: String },
    #[error("`{label}` has seed {seed} more than once")]
    DuplicateSeed { label: String, seed: u64 },
    #[error("seed sets differ: `{a}` has {a_seeds:?}, `{b}` has {b_seeds:?}")]
    SeedMismatch {
        a: String,
        a_seeds: Vec<u64>,
        b: String,
        b_seeds: Vec<u64>,
    },
    #[error("trace for `{label}` seed {seed} is empty")]
    EmptyTrace { label: String, seed: u64 },
}

/// Incumbent statistics across seeds at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncumbentSummary {
    pub label: String,
    pub iteration: usize,
    pub median: f64,
    pub mean: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

/// One-sided test that `better` has lower incumbents than `worse`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub better: String,
    pub worse: String,
    pub iteration: usize,
    /// `None` when the test is undefined (for example all differences zero).
    pub p_value: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub iterations: Vec<usize>,
    pub seeds: Vec<u64>,
    pub summaries: Vec<IncumbentSummary>,
    pub tests: Vec<PairwiseTest>,
    /// Median incumbent after every iteration, per label.
    pub median_curves: BTreeMap<String, Vec<f64>>,
}

/// Builds the report from traces grouped by label. Every label must cover
/// the same seeds; tests pair incumbents by seed.
pub fn compare(groups: &BTreeMap<String, Vec<RunTrace>>, iterations: &[usize]) -> Result<ComparisonReport, CompareError> {
    if groups.len() < 2 {
        return Err(CompareError::TooFewAlgorithms(groups.len()));
    }
    let mut by_seed: BTreeMap<&str, BTreeMap<u64, &RunTrace>> = BTreeMap::new();
    for (label, traces) in groups {
        if traces.is_empty() {
            return Err(CompareError::NoTraces { label: label.clone() });
        }
        let mut m = BTreeMap::new();
        for t in traces {
            if t.is_empty() {
                return Err(CompareError::EmptyTrace {
                    label: label.clone(),
                    seed: t.header.seed,
                });
            }
            if m.insert(t.header.seed, t).is_some() {
                return Err(CompareError::DuplicateSeed {
                    label: label.clone(),
                    seed: t.header.seed,
                });
            }
        }
        by_seed.insert(label, m);
    }
    let mut labels = by_seed.keys();
    let first = *labels.next().expect("at least two labels");
    let seeds: BTreeSet<u64> = by_seed[first].keys().copied().collect();
    for &l in labels {
        let other: BTreeSet<u64> = by_seed[l].keys().copied().collect();
        if other != seeds {
            return Err(CompareError::SeedMismatch {
                a: first.to_string(),
                a_seeds: seeds.into_iter().collect(),
                b: l.to_string(),
                b_seeds: other.into_iter().collect(),
            });
        }
    }
    let seeds: Vec<u64> = seeds.into_iter().collect();
    let incumbents = |label: &str, it: usize| -> Vec<f64> {
        seeds
            .iter()
            .map(|s| by_seed[label][s].incumbent_at(it).expect("traces are non-empty"))
            .collect()
    };

    let mut summaries = Vec::new();
    for &it in iterations {
        for &label in by_seed.keys() {
            let xs = incumbents(label, it);
            summaries.push(IncumbentSummary {
                label: label.to_string(),
                iteration: it,
                median: median(&xs),
                mean: xs.iter().sum::<f64>() / xs.len() as f64,
                q1: quantile(&xs, 0.25),
                q3: quantile(&xs, 0.75),
                min: quantile(&xs, 0.0),
                max: quantile(&xs, 1.0),
            });
        }
    }

    let mut tests = Vec::new();
    for &it in iterations {
        for &a in by_seed.keys() {
            for &b in by_seed.keys() {
                if a == b {
                    continue;
                }
                // `a` better means `b`'s incumbents are greater.
                let (p_value, note) = match wilcoxon_one_sided(&incumbents(b, it), &incumbents(a, it)) {
                    Ok(r) => (Some(r.p_value), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                tests.push(PairwiseTest {
                    better: a.to_string(),
                    worse: b.to_string(),
                    iteration: it,
                    p_value,
                    note,
                });
            }
        }
    }

    let median_curves = by_seed
        .iter()
        .map(|(&label, runs)| {
            let len = runs.values().map(|t| t.len()).max().unwrap_or(0);
            let curve = (1..=len).map(|it| median(&incumbents(label, it))).collect();
            (label.to_string(), curve)
        })
        .collect();

    Ok(ComparisonReport {
        iterations: iterations.to_vec(),
        seeds,
        summaries,
        tests,
        median_curves,
    })
}

impl fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seeds: {:?}", self.seeds)?;
        writeln!(
            f,
            "{:<16} {:>6} {:>12} {:>12} {:>12} {:>12}",
            "label", "iter", "median", "mean", "q1", "q3"
        )?;
        for s in &self.summaries {
            writeln!(
                f,
                "{:<16} {:>6} {:>12.6e} {:>12.6e} {:>12.6e} {:>12.6e}",
                s.label, s.iteration, s.median, s.mean, s.q1, s.q3
            )?;
        }
        writeln!(f)?;
        writeln!(f, "{:<16} {:<16} {:>6} {:>12}", "better", "worse", "iter", "p")?;
        for t in &self.tests {
            let p = match (t.p_value, &t.note) {
                (Some(p), _) => format!("{p:.6}"),
                (None, Some(n)) => format!("undefined ({n})"),
                (None, None) => "undefined".into(),
            };
            writeln!(f, "{:<16} {:<16} {:>6} {:>12}", t.better, t.worse, t.iteration, p)?;
        }
        Ok(())
    }
}
