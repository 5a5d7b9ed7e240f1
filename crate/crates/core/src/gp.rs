//! Exact Gaussian-process regression with an [`AddTreeKernel`].

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::kernel::{AddTreeKernel, KernelError, ParamLayout, Tying};
use crate::linalg::{dot, Cholesky, JitterPolicy, LinalgError, Matrix};
use crate::optim::{minimize, LbfgsConfig, OptimError};
use crate::tree::{LinearizedPoint, PointError, VertexId};
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("dataset has {points} points, {targets} targets and {noise} noise entries")]
    LengthMismatch { points: usize, targets: usize, noise: usize },
    #[error("noise variance of observation {0} is negative or not finite")]
    InvalidNoise(usize),
    #[error("target of observation {0} is not finite")]
    NonFiniteTarget(usize),
    #[error("observation {index} lies on leaf {leaf}, which the kernel's tree does not have")]
    ForeignPoint { index: usize, leaf: usize },
    #[error("cannot fit hyperparameters without observations")]
    EmptyDataset,
    #[error("restart count must be at least 1")]
    NoRestarts,
    #[error("observation noise must be positive and shared by every observation")]
    ZeroNoise,
    #[error("log marginal likelihood is not finite")]
    NonFinite,
    #[error("factorization failed: {0}")]
    Factorization(#[from] LinalgError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Point(#[from] PointError),
    #[error("every restart failed; last error: {0}")]
    AllRestartsFailed(OptimError),
}

/// Observations with per-observation noise variances.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset<T> {
    points: Vec<LinearizedPoint<T>>,
    targets: Vec<T>,
    noise: Vec<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(points: Vec<LinearizedPoint<T>>, targets: Vec<T>, noise: Vec<T>) -> Result<Self, GpError> {
        if points.len() != targets.len() || points.len() != noise.len() {
            return Err(GpError::LengthMismatch {
                points: points.len(),
                targets: targets.len(),
                noise: noise.len(),
            });
        }
        if let Some(i) = targets.iter().position(|y| !y.is_finite()) {
            return Err(GpError::NonFiniteTarget(i));
        }
        if let Some(i) = noise.iter().position(|s| !(*s >= T::zero() && s.is_finite())) {
            return Err(GpError::InvalidNoise(i));
        }
        Ok(Self { points, targets, noise })
    }

    /// Every observation gets noise variance `noise`.
    pub fn homoscedastic(points: Vec<LinearizedPoint<T>>, targets: Vec<T>, noise: T) -> Result<Self, GpError> {
        let n = points.len();
        Self::new(points, targets, vec![noise; n])
    }

    pub fn empty() -> Self {
        Self {
            points: Vec::new(),
            targets: Vec::new(),
            noise: Vec::new(),
        }
    }

    pub fn push(&mut self, point: LinearizedPoint<T>, target: T, noise: T) -> Result<(), GpError> {
        let i = self.len();
        if !target.is_finite() {
            return Err(GpError::NonFiniteTarget(i));
        }
        if !(noise >= T::zero() && noise.is_finite()) {
            return Err(GpError::InvalidNoise(i));
        }
        self.points.push(point);
        self.targets.push(target);
        self.noise.push(noise);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[LinearizedPoint<T>] {
        &self.points
    }

    pub fn targets(&self) -> &[T] {
        &self.targets
    }

    pub fn noise(&self) -> &[T] {
        &self.noise
    }

    /// Same points and noise, different targets.
    pub fn with_targets(&self, targets: Vec<T>) -> Result<Self, GpError> {
        Self::new(self.points.clone(), targets, self.noise.clone())
    }

    pub fn with_noise(&self, noise: Vec<T>) -> Result<Self, GpError> {
        Self::new(self.points.clone(), self.targets.clone(), noise)
    }
}

/// Mean and variance of a Gaussian marginal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior<T> {
    pub mean: T,
    pub variance: T,
}

impl<T: Scalar> Posterior<T> {
    pub fn std(&self) -> T {
        self.variance.max(T::zero()).sqrt()
    }
}

/// Training rows whose covariance with a query on `leaf` can be non-zero:
/// those sharing a contributing vertex with the query's path.
#[derive(Debug, Clone, Copy)]
pub struct SelectionView<'a> {
    pub leaf: usize,
    pub rows: &'a [usize],
}

#[derive(Debug)]
struct Selection<T> {
    rows: Vec<usize>,
    /// `None` when the selection is every row and the full factor applies.
    factor: Option<Cholesky<T>>,
    alpha: Vec<T>,
}

/// A GP conditioned on a [`Dataset`] under fixed hyperparameters.
#[derive(Debug)]
pub struct GpModel<T> {
    kernel: AddTreeKernel<T>,
    data: Dataset<T>,
    /// `K + diag(noise) + jitter·I`.
    ky: Matrix<T>,
    chol: Cholesky<T>,
    alpha: Vec<T>,
    selections: Vec<OnceLock<Selection<T>>>,
    clamped: AtomicUsize,
}

impl<T: Scalar> Clone for GpModel<T> {
    fn clone(&self) -> Self {
        Self {
            kernel: self.kernel.clone(),
            data: self.data.clone(),
            ky: self.ky.clone(),
            chol: self.chol.clone(),
            alpha: self.alpha.clone(),
            selections: (0..self.selections.len()).map(|_| OnceLock::new()).collect(),
            clamped: AtomicUsize::new(self.clamped.load(Ordering::Relaxed)),
        }
    }
}

impl<T: Scalar> GpModel<T> {
    /// Conditions on `data` with the default jitter policy. An empty dataset
    /// gives the prior.
    pub fn fit(kernel: AddTreeKernel<T>, data: Dataset<T>) -> Result<Self, GpError> {
        Self::fit_with_jitter(kernel, data, &JitterPolicy::default())
    }

    pub fn fit_with_jitter(kernel: AddTreeKernel<T>, data: Dataset<T>, jitter: &JitterPolicy<T>) -> Result<Self, GpError> {
        let n_leaves = kernel.space().n_leaves();
        let width = kernel.space().index().width();
        for (index, p) in data.points().iter().enumerate() {
            if p.active_leaf >= n_leaves || p.slots.len() != width {
                return Err(GpError::ForeignPoint {
                    index,
                    leaf: p.active_leaf,
                });
            }
        }
        let mut ky = kernel.gram(data.points());
        ky.add_diagonal(data.noise());
        let chol = Cholesky::with_jitter(&ky, jitter)?;
        if chol.jitter() > T::zero() {
            ky.add_diagonal(&vec![chol.jitter(); data.len()]);
            tracing::debug!(jitter = chol.jitter().to_f64_lossy(), n = data.len(), "added diagonal jitter");
        }
        let alpha = chol.solve(data.targets());
        Ok(Self {
            selections: (0..n_leaves).map(|_| OnceLock::new()).collect(),
            kernel,
            data,
            ky,
            chol,
            alpha,
            clamped: AtomicUsize::new(0),
        })
    }

    pub fn kernel(&self) -> &AddTreeKernel<T> {
        &self.kernel
    }

    pub fn data(&self) -> &Dataset<T> {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cholesky(&self) -> &Cholesky<T> {
        &self.chol
    }

    /// `K_y⁻¹ y`.
    pub fn alpha(&self) -> &[T] {
        &self.alpha
    }

    pub fn jitter(&self) -> T {
        self.chol.jitter()
    }

    /// The noisy Gram matrix that was factorized, jitter included.
    pub fn noisy_gram(&self) -> &Matrix<T> {
        &self.ky
    }

    /// Number of posterior variances that were clamped into range.
    pub fn clamp_count(&self) -> usize {
        self.clamped.load(Ordering::Relaxed)
    }

    /// The shared noise variance, when every observation has the same one.
    pub fn homoscedastic_noise(&self) -> Option<T> {
        let first = *self.data.noise().first()?;
        self.data.noise().iter().all(|&s| s == first).then_some(first)
    }

    fn selection_entry(&self, leaf: usize) -> &Selection<T> {
        self.selections[leaf].get_or_init(|| {
            let index = self.kernel.space().index();
            let rows: Vec<usize> = self
                .data
                .points()
                .iter()
                .enumerate()
                .filter(|(_, p)| {
                    index
                        .lca_path(leaf, p.active_leaf)
                        .iter()
                        .any(|&v| self.kernel.contributes(v))
                })
                .map(|(i, _)| i)
                .collect();
            let full = || Selection {
                rows: (0..self.len()).collect(),
                factor: None,
                alpha: self.alpha.clone(),
            };
            if rows.len() == self.len() {
                return full();
            }
            match Cholesky::new(&self.ky.select(&rows)) {
                Ok(factor) => {
                    let y: Vec<T> = rows.iter().map(|&i| self.data.targets()[i]).collect();
                    let alpha = factor.solve(&y);
                    Selection {
                        rows,
                        factor: Some(factor),
                        alpha,
                    }
                }
                Err(_) => full(),
            }
        })
    }

    /// The rows used for queries on `leaf`.
    pub fn selection(&self, leaf: usize) -> SelectionView<'_> {
        SelectionView {
            leaf,
            rows: &self.selection_entry(leaf).rows,
        }
    }

    fn clamp_variance(&self, var: T, prior: T) -> T {
        if var < T::zero() || var > prior {
            self.clamped.fetch_add(1, Ordering::Relaxed);
        }
        var.max(T::zero()).min(prior)
    }

    /// Predictive distribution of the latent function at `x`, computed on the
    /// rows selected for `x`'s leaf.
    pub fn posterior(&self, x: &LinearizedPoint<T>) -> Posterior<T> {
        let prior = self.kernel.diag(x);
        let sel = self.selection_entry(x.active_leaf);
        let k: Vec<T> = sel
            .rows
            .iter()
            .map(|&i| self.kernel.eval(&self.data.points()[i], x))
            .collect();
        let mean = dot(&k, &sel.alpha);
        let v = sel.factor.as_ref().unwrap_or(&self.chol).solve_lower(&k);
        Posterior {
            mean,
            variance: self.clamp_variance(prior - dot(&v, &v), prior),
        }
    }

    /// Posterior at the configuration (`leaf`, `values`) together with the
    /// gradients of mean and variance with respect to `values`.
    pub fn posterior_with_grad(&self, leaf: usize, values: &[T]) -> Result<(Posterior<T>, Vec<T>, Vec<T>), GpError> {
        let x = self.kernel.space().linearize(leaf, values)?;
        let index = self.kernel.space().index();
        let prior = self.kernel.diag(&x);
        let sel = self.selection_entry(leaf);
        let dim = values.len();
        let m = sel.rows.len();
        let mut k = vec![T::zero(); m];
        // dk[r * dim + d] = ∂k(x, x_r) / ∂values[d]
        let mut dk = vec![T::zero(); m * dim];
        let mut buf = Vec::new();
        for (r, &i) in sel.rows.iter().enumerate() {
            let xi = &self.data.points()[i];
            for &v in index.lca_path(leaf, xi.active_leaf) {
                let slots = index.slots(v).values();
                let range = index.path_value_range(leaf, v).expect("lca path lies on the query path");
                buf.clear();
                buf.resize(range.len(), T::zero());
                k[r] += self
                    .kernel
                    .vertex_eval_input_grad(v, &values[range.clone()], &xi.slots[slots], &mut buf);
                for (d, g) in range.zip(&buf) {
                    dk[r * dim + d] += *g;
                }
            }
        }
        let factor = sel.factor.as_ref().unwrap_or(&self.chol);
        let mean = dot(&k, &sel.alpha);
        let w = factor.solve_lower(&k);
        let mut kinv_k = w.clone();
        factor.solve_upper_in_place(&mut kinv_k);
        let mut dmean = vec![T::zero(); dim];
        let mut dvar = vec![T::zero(); dim];
        for r in 0..m {
            for d in 0..dim {
                let g = dk[r * dim + d];
                dmean[d] += sel.alpha[r] * g;
                dvar[d] -= T::lit(2.0) * kinv_k[r] * g;
            }
        }
        let post = Posterior {
            mean,
            variance: self.clamp_variance(prior - dot(&w, &w), prior),
        };
        Ok((post, dmean, dvar))
    }

    fn component_cross(&self, v: VertexId, values: &[T], grad: Option<&mut Vec<T>>) -> Vec<T> {
        let index = self.kernel.space().index();
        let slots = index.slots(v).values();
        let dim = values.len();
        let mut buf = vec![T::zero(); dim];
        let mut grads = grad;
        if let Some(g) = grads.as_deref_mut() {
            g.clear();
            g.resize(self.len() * dim, T::zero());
        }
        self.data
            .points()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if !index.on_path(p.active_leaf, v) {
                    return T::zero();
                }
                let b = &p.slots[slots.clone()];
                match grads.as_deref_mut() {
                    Some(g) => {
                        let k = self.kernel.vertex_eval_input_grad(v, values, b, &mut buf);
                        g[i * dim..(i + 1) * dim].copy_from_slice(&buf);
                        k
                    }
                    None => self.kernel.vertex_eval(v, values, b),
                }
            })
            .collect()
    }

    fn check_component(&self, v: VertexId, values: &[T]) -> Result<(), GpError> {
        let space = self.kernel.space();
        if v.0 >= space.n_vertices() {
            return Err(KernelError::UnknownVertex(v).into());
        }
        let dim = space.dim(v);
        if values.len() != dim {
            return Err(KernelError::DimensionMismatch {
                expected: dim,
                got: values.len(),
            }
            .into());
        }
        Ok(())
    }

    /// Posterior of vertex `v`'s additive component at `values`.
    pub fn component_posterior(&self, v: VertexId, values: &[T]) -> Result<Posterior<T>, GpError> {
        self.check_component(v, values)?;
        let prior = self.kernel.vertex_eval(v, values, values);
        let c = self.component_cross(v, values, None);
        let w = self.chol.solve_lower(&c);
        Ok(Posterior {
            mean: dot(&c, &self.alpha),
            variance: self.clamp_variance(prior - dot(&w, &w), prior),
        })
    }

    /// [`Self::component_posterior`] plus gradients of mean and variance
    /// with respect to `values`.
    pub fn component_posterior_with_grad(
        &self,
        v: VertexId,
        values: &[T],
    ) -> Result<(Posterior<T>, Vec<T>, Vec<T>), GpError> {
        self.check_component(v, values)?;
        let dim = values.len();
        let prior = self.kernel.vertex_eval(v, values, values);
        let mut dc = Vec::new();
        let c = self.component_cross(v, values, Some(&mut dc));
        let w = self.chol.solve_lower(&c);
        let mut kinv_c = w.clone();
        self.chol.solve_upper_in_place(&mut kinv_c);
        let mut dmean = vec![T::zero(); dim];
        let mut dvar = vec![T::zero(); dim];
        for i in 0..self.len() {
            for d in 0..dim {
                let g = dc[i * dim + d];
                dmean[d] += self.alpha[i] * g;
                dvar[d] -= T::lit(2.0) * kinv_c[i] * g;
            }
        }
        let post = Posterior {
            mean: dot(&c, &self.alpha),
            variance: self.clamp_variance(prior - dot(&w, &w), prior),
        };
        Ok((post, dmean, dvar))
    }

    /// `-½ yᵀ K_y⁻¹ y - ½ log|K_y| - (n/2) log 2π`.
    pub fn log_marginal_likelihood(&self) -> T {
        let n = T::from_usize_lossy(self.len());
        -T::lit(0.5) * dot(self.data.targets(), &self.alpha)
            - T::lit(0.5) * self.chol.log_det()
            - T::lit(0.5) * n * (T::lit(2.0) * T::PI()).ln()
    }

    /// Gradient of the log marginal likelihood with respect to the log
    /// hyperparameters in `layout` and, when `noise` is set, a trailing log
    /// multiplier on the noise variances.
    pub fn log_marginal_likelihood_grad(&self, layout: &ParamLayout, noise: bool) -> Vec<T> {
        let n = self.len();
        let mut grad = vec![T::zero(); layout.len() + usize::from(noise)];
        if n == 0 {
            return grad;
        }
        // W = α αᵀ - K_y⁻¹; ∂L/∂p = ½ tr(W ∂K/∂p).
        let mut w = self.chol.inverse();
        for i in 0..n {
            for j in 0..n {
                w[(i, j)] = self.alpha[i] * self.alpha[j] - w[(i, j)];
            }
        }
        let index = self.kernel.space().index();
        let points = self.data.points();
        let mut buf = Vec::new();
        for i in 0..n {
            for j in 0..=i {
                // Off-diagonal pairs appear twice in the trace.
                let weight = if i == j { w[(i, i)] } else { T::lit(2.0) * w[(i, j)] };
                let (a, b) = (&points[i], &points[j]);
                for &v in index.lca_path(a.active_leaf, b.active_leaf) {
                    let slots = layout.vertex_slots(v);
                    if slots.iter().all(Option::is_none) {
                        continue;
                    }
                    let r = index.slots(v).values();
                    buf.clear();
                    buf.resize(slots.len(), T::zero());
                    self.kernel
                        .vertex_eval_param_grad(v, &a.slots[r.clone()], &b.slots[r], &mut buf);
                    for (slot, g) in slots.iter().zip(&buf) {
                        if let Some(k) = slot {
                            grad[*k] += weight * *g;
                        }
                    }
                }
            }
        }
        if noise {
            grad[layout.len()] = (0..n).map(|i| w[(i, i)] * self.data.noise()[i]).sum();
        }
        grad.iter_mut().for_each(|g| *g *= T::lit(0.5));
        grad
    }
}

/// Settings for [`fit_hyperparameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions<T> {
    pub restarts: usize,
    /// Bounds on every log lengthscale and log output scale.
    pub log_bounds: (T, T),
    /// Bounds on the noise variance; `None` keeps the dataset's noise fixed.
    pub noise_bounds: Option<(T, T)>,
    pub tying: Tying,
    pub seed: u64,
    pub optimizer: LbfgsConfig<T>,
    /// Upper limit applied to every fitted lengthscale.
    pub lengthscale_cap: Option<T>,
    pub jitter: JitterPolicy<T>,
}

impl<T: Scalar> Default for FitOptions<T> {
    fn default() -> Self {
        Self {
            restarts: 10,
            log_bounds: (T::lit(1e-3).ln(), T::lit(1e3).ln()),
            noise_bounds: None,
            tying: Tying::default(),
            seed: 0,
            optimizer: LbfgsConfig::default(),
            lengthscale_cap: None,
            jitter: JitterPolicy::default(),
        }
    }
}

/// Outcome of one restart: final log marginal likelihood or the error.
#[derive(Debug, Clone, PartialEq)]
pub struct RestartReport<T> {
    pub result: Result<T, OptimError>,
    pub evals: usize,
}

#[derive(Debug)]
pub struct FitResult<T> {
    pub model: GpModel<T>,
    pub log_likelihood: T,
    pub restarts: Vec<RestartReport<T>>,
}

/// Maximizes the log marginal likelihood over log hyperparameters with
/// multi-start bounded L-BFGS. The first restart starts at `template`'s
/// values; the rest are log-uniform draws within the bounds. Lengthscales
/// are then capped at `opts.lengthscale_cap`.
pub fn fit_hyperparameters<T: Scalar>(
    template: &AddTreeKernel<T>,
    data: &Dataset<T>,
    opts: &FitOptions<T>,
) -> Result<FitResult<T>, GpError> {
    if data.is_empty() {
        return Err(GpError::EmptyDataset);
    }
    if opts.restarts == 0 {
        return Err(GpError::NoRestarts);
    }
    let layout = template.layout(opts.tying);
    let k = layout.len();

    // Noise variances are exp(η)·weights, weights normalized to mean 1.
    let mean_noise = data.noise().iter().copied().sum::<T>() / T::from_usize_lossy(data.len());
    let weights: Vec<T> = if mean_noise > T::zero() {
        data.noise().iter().map(|&s| s / mean_noise).collect()
    } else {
        vec![T::one(); data.len()]
    };
    let noise_log_bounds = opts.noise_bounds.map(|(lo, hi)| (lo.ln(), hi.ln()));

    let mut bounds = vec![opts.log_bounds; k];
    let mut start0 = layout.pack(template);
    if let Some(nb) = noise_log_bounds {
        bounds.push(nb);
        start0.push(mean_noise.ln().max(nb.0).min(nb.1));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![start0];
    for _ in 1..opts.restarts {
        starts.push(
            bounds
                .iter()
                .map(|&(lo, hi)| lo + (hi - lo) * T::lit(rng.random::<f64>()))
                .collect(),
        );
    }

    let build = |p: &[T]| -> Result<GpModel<T>, GpError> {
        let kernel = layout.unpack(template, &p[..k]);
        let d = match noise_log_bounds {
            Some(_) => {
                let s = p[k].exp();
                data.with_noise(weights.iter().map(|&w| w * s).collect())?
            }
            None => data.clone(),
        };
        GpModel::fit_with_jitter(kernel, d, &opts.jitter)
    };
    let objective = |p: &[T], g: &mut [T]| -> T {
        match build(p) {
            Ok(m) => {
                let lml = m.log_marginal_likelihood();
                let grad = m.log_marginal_likelihood_grad(&layout, noise_log_bounds.is_some());
                for (gi, v) in g.iter_mut().zip(grad) {
                    *gi = -v;
                }
                -lml
            }
            Err(_) => T::nan(),
        }
    };

    let outcomes: Vec<_> = starts
        .par_iter()
        .map(|x0| minimize(objective, x0, &bounds, &opts.optimizer))
        .collect();

    let mut best: Option<(T, Vec<T>)> = None;
    let mut last_err = None;
    let mut reports = Vec::with_capacity(outcomes.len());
    for out in outcomes {
        match out {
            Ok(r) => {
                reports.push(RestartReport {
                    result: Ok(-r.f),
                    evals: r.evals,
                });
                if best.as_ref().map_or(true, |(f, _)| r.f < *f) {
                    best = Some((r.f, r.x));
                }
            }
            Err(e) => {
                reports.push(RestartReport {
                    result: Err(e.clone()),
                    evals: 0,
                });
                last_err = Some(e);
            }
        }
    }
    let (_, mut p) = best.ok_or_else(|| GpError::AllRestartsFailed(last_err.unwrap_or(OptimError::NoStarts)))?;

    if let Some(cap) = opts.lengthscale_cap {
        let mut kernel = layout.unpack(template, &p[..k]);
        for v in 0..kernel.params().len() {
            for l in &mut kernel.vertex_params_mut(VertexId(v)).lengthscales {
                *l = l.min(cap);
            }
        }
        let capped = layout.pack(&kernel);
        // Tied parameters are capped identically, so packing is lossless.
        p[..k].copy_from_slice(&capped);
        let model = {
            let d = match noise_log_bounds {
                Some(_) => data.with_noise(weights.iter().map(|&w| w * p[k].exp()).collect())?,
                None => data.clone(),
            };
            GpModel::fit_with_jitter(kernel, d, &opts.jitter)?
        };
        return finish(model, reports);
    }
    finish(build(&p)?, reports)
}

fn finish<T: Scalar>(model: GpModel<T>, restarts: Vec<RestartReport<T>>) -> Result<FitResult<T>, GpError> {
    let lml = model.log_marginal_likelihood();
    if !lml.is_finite() {
        return Err(GpError::NonFinite);
    }
    tracing::debug!(
        log_likelihood = lml.to_f64_lossy(),
        jitter = model.jitter().to_f64_lossy(),
        restarts = restarts.len(),
        failed = restarts.iter().filter(|r| r.result.is_err()).count(),
        "fitted hyperparameters"
    );
    Ok(FitResult {
        model,
        log_likelihood: lml,
        restarts,
    })
}
