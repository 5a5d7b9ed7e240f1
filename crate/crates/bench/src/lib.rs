//! Benchmark harness for tree-structured Bayesian optimization: objectives,
//! optimizer loops with baselines, the regression study, run traces and
//! seed-paired statistical comparison.
pub mod compare;
pub mod objective;
pub mod regression;
pub mod runner;
pub mod stats;
pub mod trace;

pub use compare::{compare, ComparisonReport, CompareError, IncumbentSummary, PairwiseTest};
pub use objective::{
    builtin, fig1_spec, jenatton_objective, jenatton_spec, ExternalObjective, FnObjective, NoiseModel, Objective,
    ObjectiveError, RandomTreeObjective,
};
pub use regression::{run_regression_study, summarize, Method, RegressionConfig, RegressionRecord, RegressionRow, StudyError};
pub use runner::{calibrate_rates, run_batch, run_bo, Algorithm, BoConfig, RunError, StepError};
pub use stats::{ks_uniform_distance, median, quantile, wilcoxon_one_sided, StatsError, WilcoxonResult};
pub use trace::{config_digest, Phase, RunTrace, TraceError, TraceHeader, TraceRecord};
