use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use thiserror::Error;

use super::{PathIndex, TreeSpec, VertexId};
use crate::Scalar;

/// Sentinels are drawn from a process-wide counter mapped onto the negative
/// reals; tags are non-negative, so a sentinel never equals a tag.
static SENTINELS: AtomicU64 = AtomicU64::new(0);

fn next_sentinel<T: Scalar>() -> T {
    let n = SENTINELS.fetch_add(1, Ordering::Relaxed);
    -(T::one() + T::from_u64(n).unwrap_or_else(T::max_value))
}

/// Errors raised when encoding or querying a configuration.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PointError {
    #[error("leaf {leaf} does not exist (space has {n_leaves} leaves)")]
    UnknownLeaf { leaf: usize, n_leaves: usize },
    #[error("leaf {leaf} expects {expected} values, got {got}")]
    WrongValueCount {
        leaf: usize,
        expected: usize,
        got: usize,
    },
    #[error("value {value} for dimension {dim} of vertex `{vertex}` is outside [{lo}, {hi}]")]
    OutOfBounds {
        vertex: String,
        dim: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("vertex {0} does not exist")]
    UnknownVertex(VertexId),
    #[error("vertex `{vertex}` expects {expected} values, got {got}")]
    DimensionMismatch {
        vertex: String,
        expected: usize,
        got: usize,
    },
}

/// Fixed-width tag-plus-values encoding of one configuration.
///
/// Vertices appear in breadth-first order, each as one tag slot followed by
/// its value slots. Vertices on the active path carry their sibling rank as
/// tag; every other vertex carries this point's negative sentinel and zeroed
/// values.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedPoint<T> {
    pub slots: Vec<T>,
    pub active_leaf: usize,
}

impl<T: Scalar> LinearizedPoint<T> {
    /// Tag slot of vertex `v` under `index`'s layout.
    pub fn tag(&self, index: &PathIndex, v: VertexId) -> T {
        self.slots[index.slots(v).tag]
    }
}

/// A validated tree together with its path index.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeSpace<T> {
    spec: TreeSpec<T>,
    index: PathIndex,
}

impl<T: Scalar> TreeSpace<T> {
    pub fn new(spec: TreeSpec<T>) -> Self {
        let index = PathIndex::build(&spec);
        Self { spec, index }
    }

    pub fn spec(&self) -> &TreeSpec<T> {
        &self.spec
    }

    pub fn index(&self) -> &PathIndex {
        &self.index
    }

    pub fn n_leaves(&self) -> usize {
        self.index.n_leaves()
    }

    pub fn n_vertices(&self) -> usize {
        self.spec.len()
    }

    pub fn dim(&self, v: VertexId) -> usize {
        self.spec.vertices()[v.0].dim()
    }

    pub fn bounds(&self, v: VertexId) -> &[(T, T)] {
        &self.spec.vertices()[v.0].bounds
    }

    /// Bounds of the path-value vector of `leaf`, in root-to-leaf order.
    pub fn path_bounds(&self, leaf: usize) -> Vec<(T, T)> {
        self.index
            .leaf_path(leaf)
            .iter()
            .flat_map(|v| self.bounds(*v).iter().copied())
            .collect()
    }

    /// Encodes `values` (the continuous variables along `leaf`'s path, root
    /// first) into the linear representation.
    pub fn linearize(&self, leaf: usize, values: &[T]) -> Result<LinearizedPoint<T>, PointError> {
        let n_leaves = self.index.n_leaves();
        if leaf >= n_leaves {
            return Err(PointError::UnknownLeaf { leaf, n_leaves });
        }
        let expected = self.index.effective_dim(leaf);
        if values.len() != expected {
            return Err(PointError::WrongValueCount {
                leaf,
                expected,
                got: values.len(),
            });
        }

        let sentinel = next_sentinel::<T>();
        let mut slots = vec![T::zero(); self.index.width()];
        for r in self.index.vertex_offsets() {
            slots[r.tag] = sentinel;
        }
        let mut cursor = 0;
        for &v in self.index.leaf_path(leaf) {
            let vs = &self.spec.vertices()[v.0];
            let r = self.index.slots(v);
            slots[r.tag] = T::from_u32(vs.tag).expect("tag fits scalar");
            for (d, &(lo, hi)) in vs.bounds.iter().enumerate() {
                let x = values[cursor];
                if !(x >= lo && x <= hi) {
                    return Err(PointError::OutOfBounds {
                        vertex: vs.name.clone(),
                        dim: d,
                        value: x.to_f64_lossy(),
                        lo: lo.to_f64_lossy(),
                        hi: hi.to_f64_lossy(),
                    });
                }
                slots[r.value_start + d] = x;
                cursor += 1;
            }
        }
        Ok(LinearizedPoint {
            slots,
            active_leaf: leaf,
        })
    }

    /// Values of `v` when it lies on the point's active path, otherwise the
    /// empty slice. A dimensionless vertex yields the empty slice either way;
    /// use [`TreeSpace::is_active`] to tell the two apart.
    pub fn restrict<'p>(&self, point: &'p LinearizedPoint<T>, v: VertexId) -> Result<&'p [T], PointError> {
        if v.0 >= self.n_vertices() {
            return Err(PointError::UnknownVertex(v));
        }
        if self.index.on_path(point.active_leaf, v) {
            Ok(&point.slots[self.index.slots(v).values()])
        } else {
            Ok(&[])
        }
    }

    pub fn is_active(&self, point: &LinearizedPoint<T>, v: VertexId) -> bool {
        v.0 < self.n_vertices() && self.index.on_path(point.active_leaf, v)
    }

    /// Inverse of [`TreeSpace::linearize`]: the concatenated path values.
    pub fn path_values(&self, point: &LinearizedPoint<T>) -> Vec<T> {
        self.index
            .leaf_path(point.active_leaf)
            .iter()
            .flat_map(|&v| point.slots[self.index.slots(v).values()].iter().copied())
            .collect()
    }

    /// Checks `values` against the box of vertex `v`.
    pub fn check_vertex_values(&self, v: VertexId, values: &[T]) -> Result<(), PointError> {
        let vs = self.spec.vertex(v).ok_or(PointError::UnknownVertex(v))?;
        if values.len() != vs.dim() {
            return Err(PointError::DimensionMismatch {
                vertex: vs.name.clone(),
                expected: vs.dim(),
                got: values.len(),
            });
        }
        for (d, (&x, &(lo, hi))) in values.iter().zip(&vs.bounds).enumerate() {
            if !(x >= lo && x <= hi) {
                return Err(PointError::OutOfBounds {
                    vertex: vs.name.clone(),
                    dim: d,
                    value: x.to_f64_lossy(),
                    lo: lo.to_f64_lossy(),
                    hi: hi.to_f64_lossy(),
                });
            }
        }
        Ok(())
    }

    /// Uniform draw from the box of `leaf`'s path.
    pub fn sample_values<R: Rng + ?Sized>(&self, leaf: usize, rng: &mut R) -> Vec<T> {
        self.path_bounds(leaf)
            .into_iter()
            .map(|(lo, hi)| lo + (hi - lo) * T::lit(rng.random::<f64>()))
            .collect()
    }

    /// Draws a leaf by picking every categorical value uniformly, walking down
    /// from the root (a fair coin at every binary split).
    pub fn sample_leaf_by_branches<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let mut v = self.spec.root();
        loop {
            let children = &self.spec.vertices()[v.0].children;
            if children.is_empty() {
                return self.index.leaves().iter().position(|&l| l == v).unwrap();
            }
            v = children[rng.random_range(0..children.len())];
        }
    }
}
