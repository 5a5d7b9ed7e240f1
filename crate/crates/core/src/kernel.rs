//! Stationary base kernels and the Add-Tree composition.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::tree::{LinearizedPoint, TreeSpace, VertexId};
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("expected inputs of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vertex {0} does not exist")]
    UnknownVertex(VertexId),
    #[error("vertex `{0}` is missing from the hyperparameter record")]
    MissingVertex(String),
    #[error("vertex `{0}` in the hyperparameter record is not part of the tree")]
    UnexpectedVertex(String),
    #[error("invalid hyperparameter for vertex `{vertex}`: {reason}")]
    InvalidHyperparameter { vertex: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    SquaredExponential,
    Matern32,
    Matern52,
}

impl std::str::FromStr for KernelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "squared-exponential" | "se" | "rbf" => Ok(Self::SquaredExponential),
            "matern32" | "matern-3/2" => Ok(Self::Matern32),
            "matern52" | "matern-5/2" => Ok(Self::Matern52),
            other => Err(format!("unknown kernel kind `{other}`")),
        }
    }
}

/// How a vertex without continuous variables contributes when it lies on both
/// paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroDimPolicy {
    /// Contributes its output scale.
    #[default]
    Constant,
    /// Contributes nothing, which decouples the subtrees below it.
    Ignore,
}

/// One vertex's stationary kernel with ARD lengthscales.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseKernelParams<T> {
    pub kind: KernelKind,
    pub lengthscales: Vec<T>,
    pub output_scale: T,
}

impl<T: Scalar> BaseKernelParams<T> {
    pub fn new(kind: KernelKind, lengthscales: Vec<T>, output_scale: T) -> Self {
        Self {
            kind,
            lengthscales,
            output_scale,
        }
    }

    pub fn isotropic(kind: KernelKind, dim: usize, lengthscale: T, output_scale: T) -> Self {
        Self::new(kind, vec![lengthscale; dim], output_scale)
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.output_scale > T::zero() && self.output_scale.is_finite()) {
            return Err(format!("output scale {} is not positive", self.output_scale));
        }
        if let Some(l) = self.lengthscales.iter().find(|l| !(**l > T::zero() && l.is_finite())) {
            return Err(format!("lengthscale {l} is not positive"));
        }
        Ok(())
    }

    pub fn eval(&self, a: &[T], b: &[T]) -> Result<T, KernelError> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.eval_unchecked(a, b))
    }

    fn check(&self, a: &[T]) -> Result<(), KernelError> {
        if a.len() != self.dim() {
            return Err(KernelError::DimensionMismatch {
                expected: self.dim(),
                got: a.len(),
            });
        }
        Ok(())
    }

    fn scaled_sq_dist(&self, a: &[T], b: &[T]) -> T {
        a.iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((&x, &y), &l)| {
                let z = (x - y) / l;
                z * z
            })
            .sum()
    }

    /// Correlation and `-(1/r) dk/dr / s`, the factor shared by every
    /// derivative: `dk/dΔ_d = -s * h * Δ_d / l_d²`.
    fn profile(&self, r2: T) -> (T, T) {
        match self.kind {
            KernelKind::SquaredExponential => {
                let c = (-T::lit(0.5) * r2).exp();
                (c, c)
            }
            KernelKind::Matern32 => {
                let sr = (T::lit(3.0) * r2).sqrt();
                let e = (-sr).exp();
                ((T::one() + sr) * e, T::lit(3.0) * e)
            }
            KernelKind::Matern52 => {
                let sr = (T::lit(5.0) * r2).sqrt();
                let e = (-sr).exp();
                (
                    (T::one() + sr + T::lit(5.0) / T::lit(3.0) * r2) * e,
                    T::lit(5.0) / T::lit(3.0) * (T::one() + sr) * e,
                )
            }
        }
    }

    /// Kernel value; `a` and `b` must have length [`Self::dim`].
    pub fn eval_unchecked(&self, a: &[T], b: &[T]) -> T {
        let r2 = self.scaled_sq_dist(a, b);
        self.output_scale * self.profile(r2).0
    }

    /// Kernel value and its gradient with respect to the log lengthscales
    /// (first `dim` entries) and the log output scale (last entry).
    pub fn eval_with_param_grad(&self, a: &[T], b: &[T], grad: &mut [T]) -> T {
        debug_assert_eq!(grad.len(), self.dim() + 1);
        let r2 = self.scaled_sq_dist(a, b);
        let (c, h) = self.profile(r2);
        let s = self.output_scale;
        for (d, g) in grad[..self.dim()].iter_mut().enumerate() {
            let z = (a[d] - b[d]) / self.lengthscales[d];
            *g = s * h * z * z;
        }
        grad[self.dim()] = s * c;
        s * c
    }

    /// Kernel value and its gradient with respect to `a`.
    pub fn eval_with_input_grad(&self, a: &[T], b: &[T], grad: &mut [T]) -> T {
        debug_assert_eq!(grad.len(), self.dim());
        let r2 = self.scaled_sq_dist(a, b);
        let (c, h) = self.profile(r2);
        let s = self.output_scale;
        for (d, g) in grad.iter_mut().enumerate() {
            let l = self.lengthscales[d];
            *g = -s * h * (a[d] - b[d]) / (l * l);
        }
        s * c
    }
}

/// Which lengthscales and output scales share a single free parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Tying {
    /// One lengthscale per vertex instead of one per dimension.
    #[serde(default)]
    pub isotropic: bool,
    /// One output scale shared by all vertices.
    #[serde(default)]
    pub shared_scale: bool,
}

/// Maps a flat vector of log hyperparameters onto the per-vertex kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    /// `slots[v][d]` for `d < dim(v)` is the parameter of lengthscale `d`;
    /// `slots[v][dim(v)]` is the parameter of the output scale.
    slots: Vec<Vec<Option<usize>>>,
    len: usize,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn vertex_slots(&self, v: VertexId) -> &[Option<usize>] {
        &self.slots[v.0]
    }

    /// Log hyperparameters of `kernel`. Tied parameters take the value of
    /// their first occurrence.
    pub fn pack<T: Scalar>(&self, kernel: &AddTreeKernel<T>) -> Vec<T> {
        let mut out = vec![T::nan(); self.len];
        for (v, slots) in self.slots.iter().enumerate() {
            let p = &kernel.params[v];
            for (d, slot) in slots.iter().enumerate() {
                if let Some(k) = *slot {
                    if out[k].is_nan() {
                        let x = if d < p.dim() { p.lengthscales[d] } else { p.output_scale };
                        out[k] = x.ln();
                    }
                }
            }
        }
        out
    }

    /// Writes `log_params` into a copy of `kernel`.
    pub fn unpack<T: Scalar>(&self, kernel: &AddTreeKernel<T>, log_params: &[T]) -> AddTreeKernel<T> {
        assert_eq!(log_params.len(), self.len, "parameter vector length");
        let mut out = kernel.clone();
        for (v, slots) in self.slots.iter().enumerate() {
            let p = &mut out.params[v];
            let dim = p.dim();
            for (d, slot) in slots.iter().enumerate() {
                if let Some(k) = *slot {
                    let x = log_params[k].exp();
                    if d < dim {
                        p.lengthscales[d] = x;
                    } else {
                        p.output_scale = x;
                    }
                }
            }
        }
        out
    }
}

/// Sum of per-vertex kernels along the shared prefix of two active paths.
#[derive(Debug, Clone)]
pub struct AddTreeKernel<T> {
    space: Arc<TreeSpace<T>>,
    params: Vec<BaseKernelParams<T>>,
    zero_dim: ZeroDimPolicy,
}

impl<T: Scalar> PartialEq for AddTreeKernel<T> {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.space, &other.space) && self.params == other.params && self.zero_dim == other.zero_dim
    }
}

impl<T: Scalar> AddTreeKernel<T> {
    /// Every vertex gets `kind` with all lengthscales `lengthscale` and output
    /// scale `output_scale`.
    pub fn uniform(space: Arc<TreeSpace<T>>, kind: KernelKind, lengthscale: T, output_scale: T) -> Self {
        let params = space
            .spec()
            .vertices()
            .iter()
            .map(|v| BaseKernelParams::isotropic(kind, v.dim(), lengthscale, output_scale))
            .collect();
        Self {
            space,
            params,
            zero_dim: ZeroDimPolicy::default(),
        }
    }

    pub fn with_params(space: Arc<TreeSpace<T>>, params: Vec<BaseKernelParams<T>>) -> Result<Self, KernelError> {
        if params.len() != space.n_vertices() {
            return Err(KernelError::DimensionMismatch {
                expected: space.n_vertices(),
                got: params.len(),
            });
        }
        for (v, p) in params.iter().enumerate() {
            let vs = &space.spec().vertices()[v];
            if p.dim() != vs.dim() {
                return Err(KernelError::InvalidHyperparameter {
                    vertex: vs.name.clone(),
                    reason: format!("{} lengthscales for a {}-dimensional vertex", p.dim(), vs.dim()),
                });
            }
            p.validate().map_err(|reason| KernelError::InvalidHyperparameter {
                vertex: vs.name.clone(),
                reason,
            })?;
        }
        Ok(Self {
            space,
            params,
            zero_dim: ZeroDimPolicy::default(),
        })
    }

    pub fn with_zero_dim_policy(mut self, policy: ZeroDimPolicy) -> Self {
        self.zero_dim = policy;
        self
    }

    pub fn space(&self) -> &Arc<TreeSpace<T>> {
        &self.space
    }

    pub fn params(&self) -> &[BaseKernelParams<T>] {
        &self.params
    }

    pub fn vertex_params(&self, v: VertexId) -> &BaseKernelParams<T> {
        &self.params[v.0]
    }

    pub fn vertex_params_mut(&mut self, v: VertexId) -> &mut BaseKernelParams<T> {
        &mut self.params[v.0]
    }

    pub fn zero_dim_policy(&self) -> ZeroDimPolicy {
        self.zero_dim
    }

    /// Whether `v` adds a term whenever it is shared.
    pub fn contributes(&self, v: VertexId) -> bool {
        self.params[v.0].dim() > 0 || self.zero_dim == ZeroDimPolicy::Constant
    }

    /// 1 when `v` is on both active paths, read off the tag slots.
    pub fn delta_eval(&self, v: VertexId, x: &LinearizedPoint<T>, y: &LinearizedPoint<T>) -> T {
        let tag = self.space.index().slots(v).tag;
        let (a, b) = (x.slots[tag], y.slots[tag]);
        if a == b && a >= T::zero() {
            T::one()
        } else {
            T::zero()
        }
    }

    /// `k_v` on raw vertex values. Dimensionless vertices ignore `a` and `b`.
    pub fn vertex_eval(&self, v: VertexId, a: &[T], b: &[T]) -> T {
        let p = &self.params[v.0];
        if p.dim() == 0 {
            return match self.zero_dim {
                ZeroDimPolicy::Constant => p.output_scale,
                ZeroDimPolicy::Ignore => T::zero(),
            };
        }
        p.eval_unchecked(a, b)
    }

    /// Like [`Self::vertex_eval`] but also fills `grad` with the derivative
    /// with respect to `a`.
    pub fn vertex_eval_input_grad(&self, v: VertexId, a: &[T], b: &[T], grad: &mut [T]) -> T {
        let p = &self.params[v.0];
        if p.dim() == 0 {
            return self.vertex_eval(v, a, b);
        }
        p.eval_with_input_grad(a, b, grad)
    }

    /// Like [`Self::vertex_eval`] but also fills `grad` with derivatives with
    /// respect to the vertex's log lengthscales and log output scale.
    pub fn vertex_eval_param_grad(&self, v: VertexId, a: &[T], b: &[T], grad: &mut [T]) -> T {
        let p = &self.params[v.0];
        if p.dim() == 0 {
            let k = self.vertex_eval(v, a, b);
            grad[0] = k;
            return k;
        }
        p.eval_with_param_grad(a, b, grad)
    }

    fn values<'p>(&self, x: &'p LinearizedPoint<T>, v: VertexId) -> &'p [T] {
        &x.slots[self.space.index().slots(v).values()]
    }

    /// Kernel between two points: the sum of vertex kernels from the root to
    /// the lowest common ancestor of their leaves.
    pub fn eval(&self, x: &LinearizedPoint<T>, y: &LinearizedPoint<T>) -> T {
        let mut k = T::zero();
        for &v in self.space.index().lca_path(x.active_leaf, y.active_leaf) {
            k += self.vertex_eval(v, self.values(x, v), self.values(y, v));
        }
        k
    }

    /// Same value as [`Self::eval`], computed by visiting every vertex and
    /// gating on [`Self::delta_eval`].
    pub fn eval_all_vertices(&self, x: &LinearizedPoint<T>, y: &LinearizedPoint<T>) -> T {
        let mut k = T::zero();
        for v in (0..self.space.n_vertices()).map(VertexId) {
            if self.delta_eval(v, x, y) == T::one() {
                k += self.vertex_eval(v, self.values(x, v), self.values(y, v));
            }
        }
        k
    }

    /// Prior variance at `x`.
    pub fn diag(&self, x: &LinearizedPoint<T>) -> T {
        self.eval(x, x)
    }

    pub fn gram(&self, points: &[LinearizedPoint<T>]) -> Matrix<T> {
        let n = points.len();
        let mut k = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval(&points[i], &points[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    pub fn cross(&self, points: &[LinearizedPoint<T>], x: &LinearizedPoint<T>) -> Vec<T> {
        points.iter().map(|p| self.eval(p, x)).collect()
    }

    /// Parameter layout covering every contributing vertex.
    pub fn layout(&self, tying: Tying) -> ParamLayout {
        let mut len = 0;
        let mut shared_scale = None;
        let mut slots = Vec::with_capacity(self.params.len());
        for (v, p) in self.params.iter().enumerate() {
            let mut s = vec![None; p.dim() + 1];
            if self.contributes(VertexId(v)) {
                if p.dim() > 0 {
                    if tying.isotropic {
                        s[..p.dim()].fill(Some(len));
                        len += 1;
                    } else {
                        for slot in &mut s[..p.dim()] {
                            *slot = Some(len);
                            len += 1;
                        }
                    }
                }
                let scale = if tying.shared_scale {
                    *shared_scale.get_or_insert_with(|| {
                        len += 1;
                        len - 1
                    })
                } else {
                    len += 1;
                    len - 1
                };
                s[p.dim()] = Some(scale);
            }
            slots.push(s);
        }
        ParamLayout { slots, len }
    }

    pub fn to_record(&self) -> KernelRecord {
        let vertices = self
            .space
            .spec()
            .vertices()
            .iter()
            .zip(&self.params)
            .map(|(vs, p)| {
                (
                    vs.name.clone(),
                    VertexRecord {
                        kind: p.kind,
                        lengthscales: p.lengthscales.iter().map(|l| l.to_f64_lossy()).collect(),
                        output_scale: p.output_scale.to_f64_lossy(),
                    },
                )
            })
            .collect();
        KernelRecord {
            zero_dim: self.zero_dim,
            vertices,
        }
    }

    pub fn from_record(space: Arc<TreeSpace<T>>, record: &KernelRecord) -> Result<Self, KernelError> {
        for name in record.vertices.keys() {
            if space.spec().vertex_id(name).is_none() {
                return Err(KernelError::UnexpectedVertex(name.clone()));
            }
        }
        let params = space
            .spec()
            .vertices()
            .iter()
            .map(|vs| {
                let r = record
                    .vertices
                    .get(&vs.name)
                    .ok_or_else(|| KernelError::MissingVertex(vs.name.clone()))?;
                Ok(BaseKernelParams::new(
                    r.kind,
                    r.lengthscales.iter().map(|&l| T::lit(l)).collect(),
                    T::lit(r.output_scale),
                ))
            })
            .collect::<Result<Vec<_>, KernelError>>()?;
        Ok(Self::with_params(space, params)?.with_zero_dim_policy(record.zero_dim))
    }
}

/// Named, serializable form of an [`AddTreeKernel`]'s hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRecord {
    #[serde(default)]
    pub zero_dim: ZeroDimPolicy,
    pub vertices: BTreeMap<String, VertexRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertexRecord {
    pub kind: KernelKind,
    pub lengthscales: Vec<f64>,
    pub output_scale: f64,
}
