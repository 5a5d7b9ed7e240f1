//! Sequential optimization loops: Add-Tree GP-UCB, one independent GP per
//! leaf, and uniform random search.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use addtree::acquisition::{
    fit_log_rates, mutual_information_with_noise, regret_constant, select_schedule, AcquisitionError, RegretSample,
};
use addtree::optim::LbfgsConfig;
use addtree::{
    fit_hyperparameters, propose, AddTreeKernel, Dataset, FitOptions, GpError, GpModel, Growth, KernelKind,
    LinearizedPoint, PointError, ProposeOptions, Tying, TreeSpace, UcbSchedule, ZeroDimPolicy,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::{Objective, ObjectiveError};
use crate::trace::{config_digest, Phase, RunTrace, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "addtree")]
    AddTree,
    #[serde(rename = "independent")]
    Independent,
    #[serde(rename = "random")]
    Random,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::AddTree, Algorithm::Independent, Algorithm::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::AddTree => "addtree",
            Algorithm::Independent => "independent",
            Algorithm::Random => "random",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown algorithm `{s}` (expected addtree, independent or random)"))
    }
}

/// Settings shared by every algorithm. Targets are standardized before
/// modelling, so scales and noise are in units of the observed spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoConfig {
    pub iterations: usize,
    /// Random initial evaluations; `None` means `4 +` the space's continuous
    /// dimension.
    pub n_init: Option<usize>,
    pub kernel: KernelKind,
    pub zero_dim: ZeroDimPolicy,
    /// Parameter sharing across vertices during hyperparameter fits. A
    /// shared output scale keeps sparsely observed branches from collapsing
    /// to zero prior variance.
    pub tying: Tying,
    /// Initial lengthscale `θ₀`, also the template for every vertex.
    pub theta0: f64,
    pub output_scale: f64,
    pub b0: f64,
    pub delta: f64,
    /// Rate of `g(t) = 1 + γ_g ln(1 + t)`. Fitted lengthscales are always
    /// capped at `θ₀ / g(t)`.
    pub gamma_g: f64,
    /// Rate of `b(t) = 1 + γ_b ln(1 + t)`.
    pub gamma_b: f64,
    pub fit_restarts: usize,
    pub fit_max_iters: usize,
    /// Box for lengthscales and output scales.
    pub param_bounds: (f64, f64),
    /// Initial noise variance.
    pub noise: f64,
    /// Box for the fitted noise variance; `None` keeps `noise` fixed.
    pub noise_bounds: Option<(f64, f64)>,
    /// Lower limit on the noise variance used in `β_t`.
    pub noise_floor: f64,
    pub acq_starts: usize,
    pub acq_max_iters: usize,
    pub acq_max_evals: usize,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            iterations: 80,
            n_init: None,
            kernel: KernelKind::Matern52,
            zero_dim: ZeroDimPolicy::Constant,
            tying: Tying {
                isotropic: false,
                shared_scale: true,
            },
            theta0: 1.0,
            output_scale: 0.5,
            b0: 2.0,
            delta: 0.1,
            gamma_g: 0.0,
            gamma_b: 0.0,
            fit_restarts: 3,
            fit_max_iters: 100,
            param_bounds: (1e-3, 1e3),
            noise: 1e-4,
            noise_bounds: Some((1e-6, 1e-1)),
            noise_floor: 1e-6,
            acq_starts: 5,
            acq_max_iters: 50,
            acq_max_evals: 100,
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} = {v} must be positive and finite"))
            }
        };
        if self.iterations == 0 {
            return Err("iterations must be at least 1".into());
        }
        positive("theta0", self.theta0)?;
        positive("output_scale", self.output_scale)?;
        positive("noise", self.noise)?;
        positive("noise_floor", self.noise_floor)?;
        if !(self.b0 >= 0.0 && self.b0.is_finite()) {
            return Err(format!("b0 = {} must be non-negative", self.b0));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(format!("delta = {} must lie in (0, 1)", self.delta));
        }
        for (name, g) in [("gamma_g", self.gamma_g), ("gamma_b", self.gamma_b)] {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(format!("{name} = {g} must be non-negative"));
            }
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
        if self.fit_restarts == 0 {
            return Err("fit_restarts must be at least 1".into());
        }
        if self.acq_starts == 0 || self.acq_max_evals == 0 {
            return Err("acquisition budget must allow at least one start and evaluation".into());
        }
        Ok(())
    }

    pub fn n_init_for(&self, space: &TreeSpace<f64>) -> usize {
        self.n_init.unwrap_or(4 + space.spec().total_dim())
    }

    pub fn schedule(&self, dim: usize) -> UcbSchedule {
        UcbSchedule {
            theta0: self.theta0,
            b0: self.b0,
            delta: self.delta,
            g: Growth::Log { rate: self.gamma_g },
            b: Growth::Log { rate: self.gamma_b },
            dim,
        }
    }

    fn fit_options(&self, t: usize, seed: u64) -> FitOptions<f64> {
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
            lengthscale_cap: Some(self.schedule(0).lengthscale(t)),
            ..FitOptions::default()
        }
    }

    fn propose_options(&self, seed: u64) -> ProposeOptions<f64> {
        let mut o = ProposeOptions {
            starts: self.acq_starts,
            seed,
            ..ProposeOptions::default()
        };
        o.optimizer.max_iters = self.acq_max_iters;
        o.optimizer.max_evals = self.acq_max_evals;
        o
    }
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Point(#[from] PointError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// A run that stopped early, with every completed iteration.
#[derive(Debug, Error)]
#[error("{algorithm} run (seed {seed}) aborted after {} iterations: {source}", partial.len())]
pub struct RunError {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub partial: Box<RunTrace>,
    #[source]
    pub source: StepError,
}

/// Maps observations to zero-mean unit-spread targets, negated so that the
/// models maximize.
fn standardize(ys: &[f64]) -> Vec<f64> {
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    let sd = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    ys.iter().map(|y| (mean - y) / sd).collect()
}

/// Model state carried across iterations for one GP.
struct Surrogate {
    template: AddTreeKernel<f64>,
    noise: f64,
}

impl Surrogate {
    fn new(space: Arc<TreeSpace<f64>>, cfg: &BoConfig) -> Self {
        Self {
            template: AddTreeKernel::uniform(space, cfg.kernel, cfg.theta0, cfg.output_scale)
                .with_zero_dim_policy(cfg.zero_dim),
            noise: cfg.noise,
        }
    }

    /// Refits hyperparameters warm-started from the previous fit.
    fn refit(
        &mut self,
        points: Vec<LinearizedPoint<f64>>,
        targets: Vec<f64>,
        cfg: &BoConfig,
        t: usize,
        seed: u64,
    ) -> Result<GpModel<f64>, GpError> {
        let data = Dataset::homoscedastic(points, targets, self.noise)?;
        let model = if data.len() < 2 {
            GpModel::fit(self.template.clone(), data)?
        } else {
            fit_hyperparameters(&self.template, &data, &cfg.fit_options(t, seed))?.model
        };
        self.template = model.kernel().clone();
        self.noise = model.homoscedastic_noise().unwrap_or(self.noise);
        Ok(model)
    }
}

struct Choice {
    leaf: usize,
    values: Vec<f64>,
    beta: f64,
    info_gain: f64,
    score: f64,
}

fn ucb_step(model: &GpModel<f64>, cfg: &BoConfig, dim: usize, t: usize, seed: u64) -> Result<Choice, StepError> {
    let noise = model.homoscedastic_noise().unwrap_or(cfg.noise_floor).max(cfg.noise_floor);
    let info_gain = mutual_information_with_noise(model, noise)?;
    let beta = cfg.schedule(dim).beta(t, info_gain, noise.sqrt());
    let p = propose(model, beta, &cfg.propose_options(seed))?;
    Ok(Choice {
        leaf: p.leaf,
        score: p.path_scores[p.leaf],
        values: p.values,
        beta,
        info_gain,
    })
}

/// Runs `algorithm` for `cfg.iterations` evaluations of `objective`.
///
/// The first `n_init` points come from one seeded stream shared by all
/// algorithms (uniform leaf, uniform box), so paired runs start identically.
pub fn run_bo(objective: &dyn Objective, algorithm: Algorithm, cfg: &BoConfig, seed: u64) -> Result<RunTrace, RunError> {
    let mut trace = RunTrace::new(
        algorithm,
        objective.name(),
        seed,
        config_digest(cfg),
        objective.known_optimum(),
    );
    match run_into(objective, algorithm, cfg, seed, &mut trace) {
        Ok(()) => Ok(trace),
        Err(source) => Err(RunError {
            algorithm,
            seed,
            partial: Box::new(trace),
            source,
        }),
    }
}

fn run_into(
    objective: &dyn Objective,
    algorithm: Algorithm,
    cfg: &BoConfig,
    seed: u64,
    trace: &mut RunTrace,
) -> Result<(), StepError> {
    cfg.validate().map_err(StepError::Config)?;
    let space = objective.space().clone();
    let n_init = cfg.n_init_for(&space);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut aux = ChaCha8Rng::seed_from_u64(seed);
    aux.set_stream(1);

    let n_leaves = space.n_leaves();
    let chains: Vec<Arc<TreeSpace<f64>>> = match algorithm {
        Algorithm::Independent => (0..n_leaves)
            .map(|l| {
                let spec = space.spec().path_subtree(space.index().leaf_path(l)).expect("a leaf path is a valid chain");
                Arc::new(TreeSpace::new(spec))
            })
            .collect(),
        _ => Vec::new(),
    };
    let mut joint = Surrogate::new(space.clone(), cfg);
    let mut per_leaf: Vec<Surrogate> = chains.iter().map(|c| Surrogate::new(c.clone(), cfg)).collect();

    let mut ys: Vec<f64> = Vec::new();
    let mut obs: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut best = f64::INFINITY;

    for t in 1..=cfg.iterations {
        let start = Instant::now();
        let (fit_seed, prop_seed): (u64, u64) = (aux.random(), aux.random());
        let (leaf, values, phase, beta, info_gain) = if t <= n_init || algorithm == Algorithm::Random {
            let leaf = rng.random_range(0..n_leaves);
            (leaf, space.sample_values(leaf, &mut rng), Phase::Init, None, None)
        } else {
            let z = standardize(&ys);
            let c = match algorithm {
                Algorithm::AddTree => {
                    let points = obs
                        .iter()
                        .map(|(l, v)| space.linearize(*l, v))
                        .collect::<Result<Vec<_>, _>>()?;
                    let model = joint.refit(points, z, cfg, t, fit_seed)?;
                    ucb_step(&model, cfg, space.spec().space_dim(), t, prop_seed)?
                }
                Algorithm::Independent => {
                    let mut best_choice: Option<Choice> = None;
                    for (l, chain) in chains.iter().enumerate() {
                        let (points, targets): (Vec<_>, Vec<_>) = obs
                            .iter()
                            .zip(&z)
                            .filter(|((ol, _), _)| *ol == l)
                            .map(|((_, v), &zi)| chain.linearize(0, v).map(|p| (p, zi)))
                            .collect::<Result<Vec<_>, _>>()?
                            .into_iter()
                            .unzip();
                        let sub_seed = fit_seed.wrapping_add(l as u64);
                        let model = per_leaf[l].refit(points, targets, cfg, t, sub_seed)?;
                        let mut c = ucb_step(&model, cfg, chain.spec().space_dim(), t, prop_seed.wrapping_add(l as u64))?;
                        c.leaf = l;
                        if best_choice.as_ref().map_or(true, |b| c.score > b.score) {
                            best_choice = Some(c);
                        }
                    }
                    best_choice.expect("a tree has at least one leaf")
                }
                Algorithm::Random => unreachable!("random search never models"),
            };
            (c.leaf, c.values, Phase::Model, Some(c.beta), Some(c.info_gain))
        };
        let y = objective.evaluate(leaf, &values)?;
        best = best.min(y);
        ys.push(y);
        obs.push((leaf, values.clone()));
        trace.records.push(TraceRecord {
            t,
            leaf,
            values,
            y,
            best,
            phase,
            beta,
            info_gain,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        tracing::debug!(t, leaf, y, best, ?beta, "iteration");
    }
    Ok(())
}

/// Runs every (algorithm, seed) pair in parallel; results are in input order.
pub fn run_batch(
    objective: &dyn Objective,
    algorithms: &[Algorithm],
    seeds: &[u64],
    cfg: &BoConfig,
) -> Vec<Result<RunTrace, RunError>> {
    let jobs: Vec<(Algorithm, u64)> = algorithms.iter().flat_map(|&a| seeds.iter().map(move |&s| (a, s))).collect();
    jobs.par_iter().map(|&(a, s)| run_bo(objective, a, cfg, s)).collect()
}

/// Growth rates `(γ_g, γ_b)` that lift the regret estimate of an unadapted
/// Add-Tree pilot run up to the reference `t^exponent`, split evenly in log
/// space. Zero rates mean the estimate already exceeds the reference.
pub fn calibrate_rates(objective: &dyn Objective, cfg: &BoConfig, seed: u64, exponent: f64) -> Result<(f64, f64), RunError> {
    let pilot_cfg = BoConfig {
        gamma_g: 0.0,
        gamma_b: 0.0,
        ..cfg.clone()
    };
    let pilot = run_bo(objective, Algorithm::AddTree, &pilot_cfg, seed)?;
    let samples: Vec<RegretSample> = pilot
        .records
        .iter()
        .filter_map(|r| {
            Some(RegretSample {
                t: r.t,
                beta: r.beta?,
                info_gain: r.info_gain?,
            })
        })
        .collect();
    let c1 = regret_constant(cfg.noise.max(cfg.noise_floor));
    let dim = objective.space().spec().space_dim();
    let realized = select_schedule(|t| t.powf(exponent), &samples, c1, dim, 0.5);
    Ok(fit_log_rates(&realized))
}
