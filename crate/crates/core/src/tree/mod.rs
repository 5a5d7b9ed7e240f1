//! Tree-structured conditional parameter spaces.
//!
//! A space is a rooted tree. Every vertex carries zero or more bounded
//! continuous variables; the outgoing edges of a vertex are the settings of
//! one categorical variable. Choosing a value for every categorical variable
//! on the way down selects a root-to-leaf path, so a configuration is fully
//! described by a leaf index plus the continuous values along that leaf's
//! path, concatenated in root-to-leaf order.
//!
//! [`TreeSpec`] holds the validated tree, [`PathIndex`] the derived
//! leaf paths, lowest common ancestors and linear layout, and [`TreeSpace`]
//! bundles both and produces [`LinearizedPoint`]s.

mod format;
mod index;
mod linear;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

pub use index::{PathIndex, SlotRange};
pub use linear::{LinearizedPoint, PointError, TreeSpace};

/// Index of a vertex in breadth-first order; the root is always `VertexId(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VertexId(pub usize);

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// One vertex of a validated tree.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexSpec<T> {
    pub name: String,
    pub bounds: Vec<(T, T)>,
    /// Rank among siblings under the parent's branch-label order (0 for the root).
    pub tag: u32,
    pub parent: Option<VertexId>,
    /// Children indexed by branch label.
    pub children: Vec<VertexId>,
    pub depth: usize,
}

impl<T> VertexSpec<T> {
    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Errors raised while reading or validating a tree specification.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("malformed tree spec: {0}")]
    Parse(String),
    #[error("tree spec has no vertices")]
    Empty,
    #[error("vertex `{0}` is declared more than once")]
    DuplicateVertex(String),
    #[error("edge ({parent}, {label}, {child}) references unknown vertex `{missing}`")]
    UnknownVertex {
        parent: String,
        label: u32,
        child: String,
        missing: String,
    },
    #[error("vertex `{vertex}` has branch label {label} on more than one outgoing edge")]
    DuplicateBranchLabel { vertex: String, label: u32 },
    #[error("branch labels of vertex `{vertex}` are {labels:?}, expected 0..{}", labels.len())]
    NonContiguousLabels { vertex: String, labels: Vec<u32> },
    #[error("vertex `{0}` has more than one parent")]
    MultipleParents(String),
    #[error("declared root `{0}` has a parent")]
    RootHasParent(String),
    #[error("declared root `{0}` is not a vertex")]
    UnknownRoot(String),
    #[error("tree spec has several parentless vertices: {0:?}")]
    MultipleRoots(Vec<String>),
    #[error("cycle through vertex `{0}`")]
    Cycle(String),
    #[error("vertex `{0}` is not reachable from the root")]
    Unreachable(String),
    #[error("vertex `{vertex}` dimension {dim}: bounds ({lo}, {hi}) must be finite with lo < hi")]
    InvalidBounds {
        vertex: String,
        dim: usize,
        lo: f64,
        hi: f64,
    },
    #[error("vertex `{vertex}` declares dim {declared} but lists {given} bounds")]
    DimMismatch {
        vertex: String,
        declared: usize,
        given: usize,
    },
}

/// Validated tree-structured parameter space. Vertices are stored in
/// breadth-first order with children visited by ascending branch label.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeSpec<T> {
    vertices: Vec<VertexSpec<T>>,
    by_name: HashMap<String, VertexId>,
}

impl<T: Scalar> TreeSpec<T> {
    pub fn builder() -> TreeSpecBuilder<T> {
        TreeSpecBuilder::default()
    }

    /// Parses the TOML tree-spec format documented in the README.
    pub fn parse(text: &str) -> Result<Self, SpecError> {
        format::parse(text)
    }

    pub fn root(&self) -> VertexId {
        VertexId(0)
    }

    pub fn vertices(&self) -> &[VertexSpec<T>] {
        &self.vertices
    }

    pub fn vertex(&self, id: VertexId) -> Option<&VertexSpec<T>> {
        self.vertices.get(id.0)
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn vertex_id(&self, name: &str) -> Option<VertexId> {
        self.by_name.get(name).copied()
    }

    /// Child reached from `parent` through branch `label`.
    pub fn child(&self, parent: VertexId, label: u32) -> Option<VertexId> {
        self.vertex(parent)?.children.get(label as usize).copied()
    }

    /// Total number of continuous variables in the space.
    pub fn total_dim(&self) -> usize {
        self.vertices.iter().map(VertexSpec::dim).sum()
    }

    /// Number of categorical variables: one per vertex with two or more children.
    pub fn categorical_count(&self) -> usize {
        self.vertices.iter().filter(|v| v.children.len() > 1).count()
    }

    /// Dimension of the whole space, continuous plus categorical variables.
    pub fn space_dim(&self) -> usize {
        self.total_dim() + self.categorical_count()
    }

    /// Edges as `(parent, label) -> child`.
    pub fn edges(&self) -> BTreeMap<(VertexId, u32), VertexId> {
        let mut edges = BTreeMap::new();
        for (p, v) in self.vertices.iter().enumerate() {
            for (label, &c) in v.children.iter().enumerate() {
                edges.insert((VertexId(p), label as u32), c);
            }
        }
        edges
    }

    /// Rebuilds a root-to-leaf `path` as a single-leaf chain. Used to model one
    /// leaf's function in isolation.
    pub fn path_subtree(&self, path: &[VertexId]) -> Result<TreeSpec<T>, SpecError> {
        let mut b = TreeSpec::builder();
        for &v in path {
            let vs = &self.vertices[v.0];
            b = b.vertex(vs.name.clone(), vs.bounds.clone());
        }
        for w in path.windows(2) {
            b = b.edge(
                self.vertices[w[0].0].name.clone(),
                0,
                self.vertices[w[1].0].name.clone(),
            );
        }
        b.build()
    }
}

/// Unvalidated description of a tree; [`TreeSpecBuilder::build`] checks every invariant.
#[derive(Debug, Clone)]
pub struct TreeSpecBuilder<T> {
    vertices: Vec<(String, Vec<(T, T)>)>,
    edges: Vec<(String, u32, String)>,
    root: Option<String>,
}

impl<T> Default for TreeSpecBuilder<T> {
    fn default() -> Self {
        Self {
            vertices: Vec::new(),
            edges: Vec::new(),
            root: None,
        }
    }
}

impl<T: Scalar> TreeSpecBuilder<T> {
    pub fn vertex(mut self, name: impl Into<String>, bounds: Vec<(T, T)>) -> Self {
        self.vertices.push((name.into(), bounds));
        self
    }

    pub fn edge(mut self, parent: impl Into<String>, label: u32, child: impl Into<String>) -> Self {
        self.edges.push((parent.into(), label, child.into()));
        self
    }

    pub fn root(mut self, name: impl Into<String>) -> Self {
        self.root = Some(name.into());
        self
    }

    pub fn build(self) -> Result<TreeSpec<T>, SpecError> {
        if self.vertices.is_empty() {
            return Err(SpecError::Empty);
        }
        let mut raw_index: HashMap<&str, usize> = HashMap::new();
        for (i, (name, bounds)) in self.vertices.iter().enumerate() {
            if raw_index.insert(name.as_str(), i).is_some() {
                return Err(SpecError::DuplicateVertex(name.clone()));
            }
            for (d, &(lo, hi)) in bounds.iter().enumerate() {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(SpecError::InvalidBounds {
                        vertex: name.clone(),
                        dim: d,
                        lo: lo.to_f64_lossy(),
                        hi: hi.to_f64_lossy(),
                    });
                }
            }
        }

        let n = self.vertices.len();
        let mut parent: Vec<Option<usize>> = vec![None; n];
        let mut out: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(); n];
        for (p, label, c) in &self.edges {
            let lookup = |name: &String| {
                raw_index
                    .get(name.as_str())
                    .copied()
                    .ok_or_else(|| SpecError::UnknownVertex {
                        parent: p.clone(),
                        label: *label,
                        child: c.clone(),
                        missing: name.clone(),
                    })
            };
            let pi = lookup(p)?;
            let ci = lookup(c)?;
            if pi == ci {
                return Err(SpecError::Cycle(p.clone()));
            }
            if out[pi].insert(*label, ci).is_some() {
                return Err(SpecError::DuplicateBranchLabel {
                    vertex: p.clone(),
                    label: *label,
                });
            }
            if parent[ci].replace(pi).is_some() {
                return Err(SpecError::MultipleParents(c.clone()));
            }
        }
        for (i, labels) in out.iter().enumerate() {
            if labels.keys().enumerate().any(|(k, &l)| k as u32 != l) {
                return Err(SpecError::NonContiguousLabels {
                    vertex: self.vertices[i].0.clone(),
                    labels: labels.keys().copied().collect(),
                });
            }
        }

        let root = match &self.root {
            Some(name) => {
                let r = *raw_index
                    .get(name.as_str())
                    .ok_or_else(|| SpecError::UnknownRoot(name.clone()))?;
                if parent[r].is_some() {
                    return Err(SpecError::RootHasParent(name.clone()));
                }
                r
            }
            None => {
                let roots: Vec<usize> = (0..n).filter(|&i| parent[i].is_none()).collect();
                match roots.as_slice() {
                    [r] => *r,
                    [] => {
                        // Every vertex has a parent, so following parents must loop.
                        return Err(SpecError::Cycle(self.vertices[find_cycle(&parent, 0)].0.clone()));
                    }
                    many => {
                        return Err(SpecError::MultipleRoots(
                            many.iter().map(|&i| self.vertices[i].0.clone()).collect(),
                        ))
                    }
                }
            }
        };

        // Breadth-first relabelling, children by ascending branch label.
        let mut order = Vec::with_capacity(n);
        let mut new_id = vec![usize::MAX; n];
        let mut queue = VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            new_id[v] = order.len();
            order.push(v);
            queue.extend(out[v].values().copied());
        }
        if order.len() != n {
            let stray = (0..n).find(|&i| new_id[i] == usize::MAX).unwrap();
            let on_cycle = find_cycle(&parent, stray);
            return Err(if parent_chain_loops(&parent, stray) {
                SpecError::Cycle(self.vertices[on_cycle].0.clone())
            } else {
                SpecError::Unreachable(self.vertices[stray].0.clone())
            });
        }

        let mut vertices: Vec<VertexSpec<T>> = Vec::with_capacity(n);
        let mut by_name = HashMap::with_capacity(n);
        for &old in &order {
            let (name, bounds) = &self.vertices[old];
            let p = parent[old];
            let tag = match p {
                Some(pi) => *out[pi].iter().find(|(_, &c)| c == old).unwrap().0,
                None => 0,
            };
            let depth = match p {
                Some(pi) => vertices[new_id[pi]].depth + 1usize,
                None => 0,
            };
            by_name.insert(name.clone(), VertexId(new_id[old]));
            vertices.push(VertexSpec {
                name: name.clone(),
                bounds: bounds.clone(),
                tag,
                parent: p.map(|pi| VertexId(new_id[pi])),
                children: out[old].values().map(|&c| VertexId(new_id[c])).collect(),
                depth,
            });
        }
        Ok(TreeSpec { vertices, by_name })
    }
}

fn parent_chain_loops(parent: &[Option<usize>], start: usize) -> bool {
    let mut seen = vec![false; parent.len()];
    let mut v = start;
    loop {
        if seen[v] {
            return true;
        }
        seen[v] = true;
        match parent[v] {
            Some(p) => v = p,
            None => return false,
        }
    }
}

/// Walks parent pointers from `start` and returns a vertex on the first
/// repeated cycle, or the last vertex reached when the chain terminates.
fn find_cycle(parent: &[Option<usize>], start: usize) -> usize {
    let mut seen = vec![false; parent.len()];
    let mut v = start;
    while !seen[v] {
        seen[v] = true;
        match parent[v] {
            Some(p) => v = p,
            None => return v,
        }
    }
    v
}
