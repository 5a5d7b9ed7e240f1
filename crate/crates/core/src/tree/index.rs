use serde::{Deserialize, Serialize};

use super::{TreeSpec, VertexId};
use crate::Scalar;

/// Position of one vertex in the linear layout: a tag slot followed by
/// `value_end - value_start` value slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotRange {
    pub tag: usize,
    pub value_start: usize,
    pub value_end: usize,
}

impl SlotRange {
    pub fn values(&self) -> std::ops::Range<usize> {
        self.value_start..self.value_end
    }
}

/// Derived lookup tables for a [`TreeSpec`]: leaf paths, the breadth-first
/// linear layout, pairwise lowest common ancestors and effective dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct PathIndex {
    leaves: Vec<VertexId>,
    leaf_paths: Vec<Vec<VertexId>>,
    vertex_offsets: Vec<SlotRange>,
    width: usize,
    /// `lca[i * n_leaves + j]`.
    lca: Vec<VertexId>,
    effective_dims: Vec<usize>,
    /// `on_path[leaf * n_vertices + v]`.
    on_path: Vec<bool>,
    /// Offset of each vertex's values inside its leaf's path-value vector;
    /// `path_offsets[leaf][k]` belongs to `leaf_paths[leaf][k]`.
    path_offsets: Vec<Vec<usize>>,
}

impl PathIndex {
    pub fn build<T: Scalar>(spec: &TreeSpec<T>) -> Self {
        let nv = spec.len();
        let mut vertex_offsets = Vec::with_capacity(nv);
        let mut width = 0;
        for v in spec.vertices() {
            vertex_offsets.push(SlotRange {
                tag: width,
                value_start: width + 1,
                value_end: width + 1 + v.dim(),
            });
            width += 1 + v.dim();
        }

        let leaves: Vec<VertexId> = (0..nv)
            .map(VertexId)
            .filter(|&v| spec.vertices()[v.0].is_leaf())
            .collect();
        let leaf_paths: Vec<Vec<VertexId>> = leaves
            .iter()
            .map(|&leaf| {
                let mut path = vec![leaf];
                let mut v = leaf;
                while let Some(p) = spec.vertices()[v.0].parent {
                    path.push(p);
                    v = p;
                }
                path.reverse();
                path
            })
            .collect();

        let nl = leaves.len();
        let mut on_path = vec![false; nl * nv];
        for (l, path) in leaf_paths.iter().enumerate() {
            for v in path {
                on_path[l * nv + v.0] = true;
            }
        }
        let mut lca = Vec::with_capacity(nl * nl);
        for a in &leaf_paths {
            for b in &leaf_paths {
                let common = a.iter().zip(b).take_while(|(x, y)| x == y).count();
                lca.push(a[common - 1]);
            }
        }
        let effective_dims = leaf_paths
            .iter()
            .map(|p| p.iter().map(|v| spec.vertices()[v.0].dim()).sum())
            .collect();
        let path_offsets = leaf_paths
            .iter()
            .map(|p| {
                let mut acc = 0;
                p.iter()
                    .map(|v| {
                        let o = acc;
                        acc += spec.vertices()[v.0].dim();
                        o
                    })
                    .collect()
            })
            .collect();

        PathIndex {
            leaves,
            leaf_paths,
            vertex_offsets,
            width,
            lca,
            effective_dims,
            on_path,
            path_offsets,
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.vertex_offsets.len()
    }

    /// Leaf vertices, indexed by leaf number (breadth-first order).
    pub fn leaves(&self) -> &[VertexId] {
        &self.leaves
    }

    pub fn leaf_path(&self, leaf: usize) -> &[VertexId] {
        &self.leaf_paths[leaf]
    }

    pub fn leaf_paths(&self) -> &[Vec<VertexId>] {
        &self.leaf_paths
    }

    pub fn vertex_offsets(&self) -> &[SlotRange] {
        &self.vertex_offsets
    }

    pub fn slots(&self, v: VertexId) -> SlotRange {
        self.vertex_offsets[v.0]
    }

    /// Width of a linearized point: `sum over vertices of (1 + dim)`.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn effective_dims(&self) -> &[usize] {
        &self.effective_dims
    }

    pub fn effective_dim(&self, leaf: usize) -> usize {
        self.effective_dims[leaf]
    }

    pub fn lca(&self, i: usize, j: usize) -> VertexId {
        self.lca[i * self.leaves.len() + j]
    }

    /// Vertices from the root down to the lowest common ancestor of leaves
    /// `i` and `j`, inclusive. For `i == j` this is the whole leaf path.
    pub fn lca_path(&self, i: usize, j: usize) -> &[VertexId] {
        let a = self.lca(i, j);
        let path = &self.leaf_paths[i];
        let end = path.iter().position(|&v| v == a).expect("lca lies on leaf path");
        &path[..=end]
    }

    pub fn on_path(&self, leaf: usize, v: VertexId) -> bool {
        self.on_path[leaf * self.vertex_offsets.len() + v.0]
    }

    /// Leaves whose path contains `v`.
    pub fn leaves_through(&self, v: VertexId) -> impl Iterator<Item = usize> + '_ {
        (0..self.leaves.len()).filter(move |&l| self.on_path(l, v))
    }

    /// Range of `v`'s values within the path-value vector of `leaf`, or `None`
    /// when `v` is off that path.
    pub fn path_value_range(&self, leaf: usize, v: VertexId) -> Option<std::ops::Range<usize>> {
        let k = self.leaf_paths[leaf].iter().position(|&u| u == v)?;
        let start = self.path_offsets[leaf][k];
        let r = self.vertex_offsets[v.0];
        Some(start..start + (r.value_end - r.value_start))
    }
}
