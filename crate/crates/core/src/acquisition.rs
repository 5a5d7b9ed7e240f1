//! GP-UCB acquisition: the β schedule, information gain, and the per-vertex
//! proposal step over a tree-structured space.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{GpError, GpModel};
use crate::linalg::{Cholesky, LinalgError, Matrix};
use crate::optim::{halton, minimize, scale_to_box, LbfgsConfig, OptimError};
use crate::tree::{LinearizedPoint, VertexId};
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AcquisitionError {
    #[error("information gain needs a positive noise variance shared by every observation")]
    ZeroNoise,
    #[error("acquisition budget allows no evaluations")]
    ZeroBudget,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("acquisition optimizer failed at vertex {vertex:?}: {source}")]
    Optim { vertex: VertexId, source: OptimError },
}

/// A monotone inflation factor with value 1 at `t = 0`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Growth {
    /// Always 1.
    #[default]
    Constant,
    /// `1 + rate · ln(1 + t)`.
    Log { rate: f64 },
    /// `sqrt(ln(t + e))`.
    SqrtLog,
    /// Explicit values for `t = 0, 1, …`, holding the last one afterwards.
    Table { values: Vec<f64> },
}

impl Growth {
    pub fn eval(&self, t: usize) -> f64 {
        let tf = t as f64;
        match self {
            Growth::Constant => 1.0,
            Growth::Log { rate } => 1.0 + rate * tf.ln_1p(),
            Growth::SqrtLog => (tf + std::f64::consts::E).ln().sqrt(),
            Growth::Table { values } => values.get(t).or(values.last()).copied().unwrap_or(1.0),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            Growth::Log { rate } if !(*rate >= 0.0 && rate.is_finite()) => {
                Err(format!("growth rate {rate} must be finite and non-negative"))
            }
            Growth::Table { values } => {
                if values.first() != Some(&1.0) {
                    return Err("growth table must start at 1".into());
                }
                if values.windows(2).any(|w| !(w[1] >= w[0]) || !w[1].is_finite()) {
                    return Err("growth table must be finite and non-decreasing".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Schedule for the exploration weight: `B_t = b(t) g(t)^d B₀`,
/// `θ_t = θ₀ / g(t)` and
/// `β_t^{1/2} = B_t + 4σ sqrt(I_t + 1 + ln(1/δ))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UcbSchedule {
    pub theta0: f64,
    pub b0: f64,
    pub delta: f64,
    #[serde(default)]
    pub g: Growth,
    #[serde(default)]
    pub b: Growth,
    /// Exponent `d` on `g` in the norm bound.
    pub dim: usize,
}

impl UcbSchedule {
    pub fn validate(&self) -> Result<(), AcquisitionError> {
        let bad = |m: String| Err(AcquisitionError::InvalidSchedule(m));
        if !(self.theta0 > 0.0 && self.theta0.is_finite()) {
            return bad(format!("theta0 = {} must be positive", self.theta0));
        }
        if !(self.b0 >= 0.0 && self.b0.is_finite()) {
            return bad(format!("b0 = {} must be non-negative", self.b0));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta = {} must lie in (0, 1)", self.delta));
        }
        self.g.validate().or_else(|m| bad(format!("g: {m}")))?;
        self.b.validate().or_else(|m| bad(format!("b: {m}")))?;
        Ok(())
    }

    /// `B_t`.
    pub fn norm_bound(&self, t: usize) -> f64 {
        self.b.eval(t) * self.g.eval(t).powi(self.dim as i32) * self.b0
    }

    /// `θ₀ / g(t)`.
    pub fn lengthscale(&self, t: usize) -> f64 {
        self.theta0 / self.g.eval(t)
    }

    /// `β_t` for information gain `info_gain` and noise standard deviation
    /// `noise_std`.
    pub fn beta(&self, t: usize, info_gain: f64, noise_std: f64) -> f64 {
        let root = self.norm_bound(t) + 4.0 * noise_std * (info_gain + 1.0 + (1.0 / self.delta).ln()).sqrt();
        root * root
    }
}

/// `½ log det(I + σ⁻² K)` over the model's observations.
pub fn mutual_information<T: Scalar>(model: &GpModel<T>) -> Result<T, AcquisitionError> {
    if model.is_empty() {
        return Ok(T::zero());
    }
    let noise = model.homoscedastic_noise().ok_or(AcquisitionError::ZeroNoise)?;
    mutual_information_with_noise(model, noise)
}

/// [`mutual_information`] with an explicit noise variance.
pub fn mutual_information_with_noise<T: Scalar>(model: &GpModel<T>, noise: T) -> Result<T, AcquisitionError> {
    if !(noise > T::zero()) {
        return Err(AcquisitionError::ZeroNoise);
    }
    let n = model.len();
    if n == 0 {
        return Ok(T::zero());
    }
    let k = model.kernel().gram(model.data().points());
    let a = Matrix::from_fn(n, n, |i, j| {
        let e = if i == j { T::one() } else { T::zero() };
        e + k[(i, j)] / noise
    });
    Ok(T::lit(0.5) * Cholesky::new(&a)?.log_det())
}

/// `μ(x) + √β σ(x)`.
pub fn ucb<T: Scalar>(model: &GpModel<T>, x: &LinearizedPoint<T>, beta: T) -> T {
    let p = model.posterior(x);
    p.mean + beta.max(T::zero()).sqrt() * p.std()
}

/// Settings for [`propose`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProposeOptions<T> {
    /// Low-discrepancy starting points per vertex.
    pub starts: usize,
    /// Also start from the vertex's values at the best observation through it.
    pub incumbent_start: bool,
    /// Local optimizer settings; `max_evals` is the per-start budget.
    pub optimizer: LbfgsConfig<T>,
    pub seed: u64,
    pub parallel: bool,
}

impl<T: Scalar> Default for ProposeOptions<T> {
    fn default() -> Self {
        Self {
            starts: 5,
            incumbent_start: true,
            optimizer: LbfgsConfig {
                max_iters: 50,
                max_evals: 100,
                gtol: T::lit(1e-7),
                ..LbfgsConfig::default()
            },
            seed: 0,
            parallel: true,
        }
    }
}

/// Result of one acquisition step.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal<T> {
    /// Maximizer of each vertex's component UCB, indexed by vertex.
    pub vertex_points: Vec<Vec<T>>,
    /// Component UCB value at each maximizer.
    pub vertex_values: Vec<T>,
    /// Sum of component UCB maxima along each leaf's path.
    pub path_scores: Vec<T>,
    pub leaf: usize,
    /// Path values of the proposal, root first.
    pub values: Vec<T>,
    pub point: LinearizedPoint<T>,
    pub beta: T,
}

fn component_ucb<T: Scalar>(model: &GpModel<T>, v: VertexId, x: &[T], sqrt_beta: T, grad: &mut [T]) -> T {
    match model.component_posterior_with_grad(v, x) {
        Ok((p, dm, dv)) => {
            let s = p.std();
            let floor = T::lit(1e-12);
            for (g, (m, var)) in grad.iter_mut().zip(dm.iter().zip(&dv)) {
                *g = *m + if s > floor { sqrt_beta * *var / (T::lit(2.0) * s) } else { T::zero() };
            }
            p.mean + sqrt_beta * s
        }
        Err(_) => T::nan(),
    }
}

fn vertex_seed(seed: u64, v: usize) -> u64 {
    seed ^ (v as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn maximize_vertex<T: Scalar>(
    model: &GpModel<T>,
    v: VertexId,
    sqrt_beta: T,
    opts: &ProposeOptions<T>,
) -> Result<(Vec<T>, T), AcquisitionError> {
    let space = model.kernel().space();
    let bounds = space.bounds(v).to_vec();
    if bounds.is_empty() {
        let p = model.component_posterior(v, &[])?;
        return Ok((Vec::new(), p.mean + sqrt_beta * p.std()));
    }
    let mut starts: Vec<Vec<T>> = halton(bounds.len(), opts.starts, vertex_seed(opts.seed, v.0))
        .iter()
        .map(|u| scale_to_box(u, &bounds))
        .collect();
    if opts.incumbent_start {
        let index = space.index();
        let data = model.data();
        let best = data
            .points()
            .iter()
            .zip(data.targets())
            .filter(|(p, _)| index.on_path(p.active_leaf, v))
            .fold(None::<(&LinearizedPoint<T>, T)>, |acc, (p, &y)| match acc {
                Some((_, b)) if b >= y => acc,
                _ => Some((p, y)),
            });
        if let Some((p, _)) = best {
            starts.push(p.slots[index.slots(v).values()].to_vec());
        }
    }

    let mut best: Option<(Vec<T>, T)> = None;
    let mut last_err = OptimError::NoStarts;
    for x0 in &starts {
        let f = |x: &[T], g: &mut [T]| {
            let u = component_ucb(model, v, x, sqrt_beta, g);
            g.iter_mut().for_each(|gi| *gi = -*gi);
            -u
        };
        match minimize(f, x0, &bounds, &opts.optimizer) {
            Ok(r) => {
                let u = -r.f;
                if best.as_ref().map_or(true, |(_, b)| u > *b) {
                    best = Some((r.x, u));
                }
            }
            Err(e) => last_err = e,
        }
    }
    best.ok_or(AcquisitionError::Optim { vertex: v, source: last_err })
}

/// One acquisition step: maximizes every vertex's component UCB
/// independently, scores each leaf by summing the maxima along its path,
/// and assembles the proposal on the best leaf (ties go to the lowest leaf
/// index).
pub fn propose<T: Scalar>(model: &GpModel<T>, beta: T, opts: &ProposeOptions<T>) -> Result<Proposal<T>, AcquisitionError> {
    if opts.optimizer.max_evals == 0 || (opts.starts == 0 && !opts.incumbent_start) {
        return Err(AcquisitionError::ZeroBudget);
    }
    let space = model.kernel().space();
    let sqrt_beta = beta.max(T::zero()).sqrt();
    let vertices: Vec<VertexId> = (0..space.n_vertices()).map(VertexId).collect();
    let run = |&v: &VertexId| maximize_vertex(model, v, sqrt_beta, opts);
    let results: Vec<_> = if opts.parallel {
        vertices.par_iter().map(run).collect()
    } else {
        vertices.iter().map(run).collect()
    };
    let (vertex_points, vertex_values): (Vec<_>, Vec<_>) =
        results.into_iter().collect::<Result<Vec<_>, _>>()?.into_iter().unzip();

    let index = space.index();
    let path_scores: Vec<T> = index
        .leaf_paths()
        .iter()
        .map(|path| path.iter().map(|v| vertex_values[v.0]).sum())
        .collect();
    let mut leaf = 0;
    for (i, &s) in path_scores.iter().enumerate() {
        if s > path_scores[leaf] {
            leaf = i;
        }
    }
    let values: Vec<T> = index
        .leaf_path(leaf)
        .iter()
        .flat_map(|v| vertex_points[v.0].iter().copied())
        .collect();
    let point = space.linearize(leaf, &values).map_err(GpError::from)?;
    Ok(Proposal {
        vertex_points,
        vertex_values,
        path_scores,
        leaf,
        values,
        point,
        beta,
    })
}

/// Computes `β_t` from `schedule` (information gain from the model, noise
/// variance floored at `noise_floor`) and proposes with it.
pub fn propose_with_schedule<T: Scalar>(
    model: &GpModel<T>,
    schedule: &UcbSchedule,
    t: usize,
    noise_floor: T,
    opts: &ProposeOptions<T>,
) -> Result<Proposal<T>, AcquisitionError> {
    let noise = model.homoscedastic_noise().unwrap_or(noise_floor).max(noise_floor);
    let info = mutual_information_with_noise(model, noise)?;
    let beta = schedule.beta(t, info.to_f64_lossy(), noise.sqrt().to_f64_lossy());
    propose(model, T::lit(beta), opts)
}

/// `C₁ = 8 / ln(1 + σ⁻²)`.
pub fn regret_constant(noise_var: f64) -> f64 {
    8.0 / (1.0 / noise_var).ln_1p()
}

/// One step of a run as seen by [`select_schedule`]: the unadapted `β_t`
/// (with `g = b = 1`) and the information gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretSample {
    pub t: usize,
    pub beta: f64,
    pub info_gain: f64,
}

/// `g(t)` and `b(t)` at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRealization {
    pub t: usize,
    pub g: f64,
    pub b: f64,
}

/// Chooses `g(t)`, `b(t)` so the regret estimate `sqrt(C₁ t β_t I_t)` is
/// scaled up to `reference(t)`. The required inflation `ρ` is split in log
/// space: `b = ρ^split`, `g^dim = ρ^(1 - split)`. Where the reference lies
/// below the estimate no adaptation is needed and both stay at 1; a running
/// maximum keeps both non-decreasing.
pub fn select_schedule(
    reference: impl Fn(f64) -> f64,
    samples: &[RegretSample],
    c1: f64,
    dim: usize,
    split: f64,
) -> Vec<ScheduleRealization> {
    let mut g_max: f64 = 1.0;
    let mut b_max: f64 = 1.0;
    samples
        .iter()
        .map(|s| {
            let estimate = (c1 * s.t as f64 * s.beta * s.info_gain).sqrt();
            let rho = reference(s.t as f64) / estimate;
            let (g, b) = if rho > 1.0 && rho.is_finite() {
                let lr = rho.ln();
                let g = if dim == 0 { 1.0 } else { ((1.0 - split) * lr / dim as f64).exp() };
                (g, (split * lr).exp())
            } else {
                (1.0, 1.0)
            };
            g_max = g_max.max(g);
            b_max = b_max.max(b);
            ScheduleRealization {
                t: s.t,
                g: g_max,
                b: b_max,
            }
        })
        .collect()
}

/// Least-squares rates `(γ_g, γ_b)` for `1 + γ ln(1 + t)` through the
/// realizations, clamped at 0.
pub fn fit_log_rates(realizations: &[ScheduleRealization]) -> (f64, f64) {
    let rate = |f: &dyn Fn(&ScheduleRealization) -> f64| {
        let (num, den) = realizations.iter().fold((0.0, 0.0), |(n, d), r| {
            let l = (r.t as f64).ln_1p();
            (n + (f(r) - 1.0) * l, d + l * l)
        });
        if den > 0.0 {
            (num / den).max(0.0)
        } else {
            0.0
        }
    };
    (rate(&|r| r.g), rate(&|r| r.b))
}
