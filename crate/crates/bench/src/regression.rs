//! Regression study: prediction error of one Add-Tree GP against one
//! independent GP per leaf, trained on the same draws.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::Arc;

use addtree::optim::LbfgsConfig;
use addtree::{
    fit_hyperparameters, AddTreeKernel, Dataset, FitOptions, GpError, GpModel, KernelKind, LinearizedPoint, PointError,
    TreeSpace, Tying, ZeroDimPolicy,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::{Objective, ObjectiveError};
use crate::stats::median;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "addtree")]
    AddTree,
    #[serde(rename = "independent")]
    Independent,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::AddTree, Method::Independent];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::AddTree => "addtree",
            Method::Independent => "independent",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected addtree or independent)"))
    }
}

#[derive(Debug, Error)]
pub enum StudyError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Point(#[from] PointError),
    #[error("invalid study configuration: {0}")]
    Config(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    pub train_sizes: Vec<usize>,
    pub test_size: usize,
    pub seeds: Vec<u64>,
    pub kernel: KernelKind,
    pub zero_dim: ZeroDimPolicy,
    /// Parameter sharing across vertices during hyperparameter fits.
    pub tying: Tying,
    pub lengthscale: f64,
    pub output_scale: f64,
    pub fit_restarts: usize,
    pub fit_max_iters: usize,
    pub param_bounds: (f64, f64),
    /// Initial noise variance.
    pub noise: f64,
    /// Box for the fitted noise variance; `None` keeps `noise` fixed.
    pub noise_bounds: Option<(f64, f64)>,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            train_sizes: (1..=11).map(|i| 4 * i).collect(),
            test_size: 50,
            seeds: (0..10).collect(),
            kernel: KernelKind::SquaredExponential,
            zero_dim: ZeroDimPolicy::Constant,
            tying: Tying {
                isotropic: false,
                shared_scale: true,
            },
            lengthscale: 0.5,
            output_scale: 0.5,
            fit_restarts: 5,
            fit_max_iters: 200,
            param_bounds: (1e-3, 1e3),
            noise: 1e-6,
            noise_bounds: Some((1e-8, 1e-2)),
        }
    }
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.test_size == 0 {
            return Err("test_size must be at least 1".into());
        }
        if self.seeds.is_empty() || self.train_sizes.is_empty() {
            return Err("need at least one seed and one training size".into());
        }
        if !(self.noise > 0.0 && self.lengthscale > 0.0 && self.output_scale > 0.0) {
            return Err("noise, lengthscale and output_scale must be positive".into());
        }
        if self.fit_restarts == 0 {
            return Err("fit_restarts must be at least 1".into());
        }
        let (lo, hi) = self.param_bounds;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(format!("param_bounds ({lo}, {hi}) must satisfy 0 < lo < hi"));
        }
        if let Some((lo, hi)) = self.noise_bounds {
            if !(lo > 0.0 && lo < hi && hi.is_finite()) {
                return Err(format!("noise_bounds ({lo}, {hi}) must satisfy 0 < lo < hi"));
            }
        }
        Ok(())
    }

    fn fit_options(&self, seed: u64) -> FitOptions<f64> {
        FitOptions {
            restarts: self.fit_restarts,
            log_bounds: (self.param_bounds.0.ln(), self.param_bounds.1.ln()),
            noise_bounds: self.noise_bounds,
            tying: self.tying,
            seed,
            optimizer: LbfgsConfig {
                max_iters: self.fit_max_iters,
                max_evals: 2 * self.fit_max_iters,
                ..LbfgsConfig::default()
            },
            ..FitOptions::default()
        }
    }
}

/// Test-set MSE of one method for one seed and training size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionRecord {
    pub method: Method,
    pub n_train: usize,
    pub seed: u64,
    pub mse: f64,
}

/// Median over seeds of `log10(MSE)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionRow {
    pub method: Method,
    pub n_train: usize,
    pub median_log10_mse: f64,
    pub median_mse: f64,
}

struct Sample {
    leaf: usize,
    values: Vec<f64>,
    y: f64,
}

fn draw(objective: &dyn Objective, rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<Sample>, ObjectiveError> {
    let space = objective.space();
    (0..n)
        .map(|_| {
            let leaf = space.sample_leaf_by_branches(rng);
            let values = space.sample_values(leaf, rng);
            let y = objective.evaluate(leaf, &values)?;
            Ok(Sample { leaf, values, y })
        })
        .collect()
}

fn fit(
    space: &Arc<TreeSpace<f64>>,
    points: Vec<LinearizedPoint<f64>>,
    targets: Vec<f64>,
    cfg: &RegressionConfig,
    seed: u64,
) -> Result<GpModel<f64>, GpError> {
    let template = AddTreeKernel::uniform(space.clone(), cfg.kernel, cfg.lengthscale, cfg.output_scale)
        .with_zero_dim_policy(cfg.zero_dim);
    let data = Dataset::homoscedastic(points, targets, cfg.noise)?;
    if data.len() < 2 {
        return GpModel::fit(template, data);
    }
    Ok(fit_hyperparameters(&template, &data, &cfg.fit_options(seed))?.model)
}

fn mse(pred: &[f64], test: &[Sample]) -> f64 {
    pred.iter().zip(test).map(|(p, s)| (p - s.y) * (p - s.y)).sum::<f64>() / test.len() as f64
}

fn study_seed(objective: &dyn Objective, cfg: &RegressionConfig, seed: u64) -> Result<Vec<RegressionRecord>, StudyError> {
    let space = objective.space().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_max = cfg.train_sizes.iter().copied().max().unwrap_or(0);
    let train = draw(objective, &mut rng, n_max)?;
    let test = draw(objective, &mut rng, cfg.test_size)?;
    let fit_seed: u64 = rng.random();
    let chains: Vec<Arc<TreeSpace<f64>>> = (0..space.n_leaves())
        .map(|l| Arc::new(TreeSpace::new(space.spec().path_subtree(space.index().leaf_path(l)).expect("leaf path is a chain"))))
        .collect();

    let mut out = Vec::new();
    for &n in &cfg.train_sizes {
        let train = &train[..n];
        // Targets are centred on the training mean; with no data the
        // prediction is 0.
        let offset = if n == 0 { 0.0 } else { train.iter().map(|s| s.y).sum::<f64>() / n as f64 };

        let points = train.iter().map(|s| space.linearize(s.leaf, &s.values)).collect::<Result<Vec<_>, _>>()?;
        let model = fit(&space, points, train.iter().map(|s| s.y - offset).collect(), cfg, fit_seed)?;
        let pred = test
            .iter()
            .map(|s| Ok(model.posterior(&space.linearize(s.leaf, &s.values)?).mean + offset))
            .collect::<Result<Vec<f64>, PointError>>()?;
        out.push(RegressionRecord {
            method: Method::AddTree,
            n_train: n,
            seed,
            mse: mse(&pred, &test),
        });

        let mut models = Vec::with_capacity(chains.len());
        for (l, chain) in chains.iter().enumerate() {
            let mine: Vec<&Sample> = train.iter().filter(|s| s.leaf == l).collect();
            let points = mine.iter().map(|s| chain.linearize(0, &s.values)).collect::<Result<Vec<_>, _>>()?;
            let targets = mine.iter().map(|s| s.y - offset).collect();
            models.push(fit(chain, points, targets, cfg, fit_seed.wrapping_add(l as u64))?);
        }
        let pred = test
            .iter()
            .map(|s| Ok(models[s.leaf].posterior(&chains[s.leaf].linearize(0, &s.values)?).mean + offset))
            .collect::<Result<Vec<f64>, PointError>>()?;
        out.push(RegressionRecord {
            method: Method::Independent,
            n_train: n,
            seed,
            mse: mse(&pred, &test),
        });
    }
    Ok(out)
}

/// Runs every seed (in parallel) and returns per-seed records ordered by
/// seed, training size and method.
pub fn run_regression_study(objective: &dyn Objective, cfg: &RegressionConfig) -> Result<Vec<RegressionRecord>, StudyError> {
    cfg.validate().map_err(StudyError::Config)?;
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&s| study_seed(objective, cfg, s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// Median over seeds per (method, training size), ordered by method then size.
pub fn summarize(records: &[RegressionRecord]) -> Vec<RegressionRow> {
    let mut keys: Vec<(Method, usize)> = records.iter().map(|r| (r.method, r.n_train)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(method, n_train)| {
            let mses: Vec<f64> = records
                .iter()
                .filter(|r| r.method == method && r.n_train == n_train)
                .map(|r| r.mse)
                .collect();
            let logs: Vec<f64> = mses.iter().map(|m| m.log10()).collect();
            RegressionRow {
                method,
                n_train,
                median_log10_mse: median(&logs),
                median_mse: median(&mses),
            }
        })
        .collect()
}

pub fn write_csv<W: Write, R: Serialize>(w: W, rows: &[R]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: Read, T: for<'de> Deserialize<'de>>(r: R) -> Result<Vec<T>, csv::Error> {
    csv::Reader::from_reader(r).deserialize().collect()
}
