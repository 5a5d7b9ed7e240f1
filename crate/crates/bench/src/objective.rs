//! Benchmark objectives on tree-structured spaces.

use std::io::Write;
use std::process::{Command, Stdio};
use std::sync::Arc;

use addtree::{PointError, TreeSpace, TreeSpec, VertexId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const FIG1_SPEC: &str = include_str!("../fixtures/fig1.toml");
pub const JENATTON_SPEC: &str = include_str!("../fixtures/jenatton.toml");

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Point(#[from] PointError),
    #[error("objective returned a non-finite value {0}")]
    NonFinite(f64),
    #[error("external objective `{command}`: {reason}")]
    External { command: String, reason: String },
    #[error("unknown builtin objective `{0}` (expected jenatton or random)")]
    UnknownBuiltin(String),
}

/// A black-box function on a tree-structured space, addressed by leaf index
/// and the continuous values along that leaf's path (root first).
pub trait Objective: Send + Sync {
    fn name(&self) -> &str;

    fn space(&self) -> &Arc<TreeSpace<f64>>;

    fn evaluate(&self, leaf: usize, values: &[f64]) -> Result<f64, ObjectiveError>;

    /// Global minimum, when known.
    fn known_optimum(&self) -> Option<f64> {
        None
    }
}

/// Additive Gaussian noise, drawn deterministically from the input and a seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub std: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn sample(&self, leaf: usize, values: &[f64]) -> f64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((leaf as u64).to_le_bytes());
        for v in values {
            h.update(v.to_bits().to_le_bytes());
        }
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let z: f64 = StandardNormal.sample(&mut ChaCha8Rng::from_seed(seed));
        self.std * z
    }
}

type EvalFn = dyn Fn(usize, &[f64]) -> f64 + Send + Sync;

/// Objective backed by a closure over (leaf, path values).
pub struct FnObjective {
    name: String,
    space: Arc<TreeSpace<f64>>,
    eval: Box<EvalFn>,
    known_optimum: Option<f64>,
    noise: Option<NoiseModel>,
}

impl FnObjective {
    pub fn new(
        name: impl Into<String>,
        space: Arc<TreeSpace<f64>>,
        eval: impl Fn(usize, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            space,
            eval: Box::new(eval),
            known_optimum: None,
            noise: None,
        }
    }

    pub fn with_known_optimum(mut self, value: f64) -> Self {
        self.known_optimum = Some(value);
        self
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Self {
        self.noise = Some(noise);
        self
    }
}

impl std::fmt::Debug for FnObjective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnObjective")
            .field("name", &self.name)
            .field("known_optimum", &self.known_optimum)
            .field("noise", &self.noise)
            .finish_non_exhaustive()
    }
}

impl Objective for FnObjective {
    fn name(&self) -> &str {
        &self.name
    }

    fn space(&self) -> &Arc<TreeSpace<f64>> {
        &self.space
    }

    fn evaluate(&self, leaf: usize, values: &[f64]) -> Result<f64, ObjectiveError> {
        check_input(&self.space, leaf, values)?;
        let mut y = (self.eval)(leaf, values);
        if let Some(n) = &self.noise {
            y += n.sample(leaf, values);
        }
        if !y.is_finite() {
            return Err(ObjectiveError::NonFinite(y));
        }
        Ok(y)
    }

    fn known_optimum(&self) -> Option<f64> {
        self.known_optimum
    }
}

fn check_input(space: &TreeSpace<f64>, leaf: usize, values: &[f64]) -> Result<(), ObjectiveError> {
    space.linearize(leaf, values)?;
    Ok(())
}

pub fn fig1_spec() -> TreeSpec<f64> {
    TreeSpec::parse(FIG1_SPEC).expect("bundled fig1 fixture is valid")
}

pub fn jenatton_spec() -> TreeSpec<f64> {
    TreeSpec::parse(JENATTON_SPEC).expect("bundled jenatton fixture is valid")
}

/// Four leaves `x² + c + r` with offsets `c = 0.1, 0.2, 0.3, 0.4`; `r` is the
/// variable of the inner vertex shared by leaf pairs. Minimum 0.1 at the first
/// leaf with `x = r = 0`. Path values are `[r, x]`.
pub fn jenatton_objective() -> FnObjective {
    let space = Arc::new(TreeSpace::new(jenatton_spec()));
    FnObjective::new("jenatton", space, |leaf, v| {
        const OFFSETS: [f64; 4] = [0.1, 0.2, 0.3, 0.4];
        v[1] * v[1] + OFFSETS[leaf] + v[0]
    })
    .with_known_optimum(0.1)
}

/// Sum of one quadratic bowl per vertex on the active path:
/// `f(x) = Σ_v (a_v ‖x_v − c_v‖² + o_v)`, centres `c_v` inside `[-1, 1]^dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomTreeObjective {
    space: Arc<TreeSpace<f64>>,
    weights: Vec<f64>,
    centres: Vec<Vec<f64>>,
    offsets: Vec<f64>,
}

impl RandomTreeObjective {
    /// A full tree with `depth` levels and `fan_out` children per inner
    /// vertex; every vertex carries `dims` variables on `[-1, 1]`.
    pub fn new(depth: usize, fan_out: u32, dims: usize, seed: u64) -> Self {
        assert!(depth >= 1, "depth must be at least 1");
        assert!(fan_out >= 1, "fan-out must be at least 1");
        let mut b = TreeSpec::builder();
        let mut level = vec!["v0".to_string()];
        b = b.vertex("v0", vec![(-1.0, 1.0); dims]);
        let mut next = 1;
        for _ in 1..depth {
            let mut children = Vec::new();
            for parent in &level {
                for label in 0..fan_out {
                    let name = format!("v{next}");
                    next += 1;
                    b = b.vertex(name.clone(), vec![(-1.0, 1.0); dims]).edge(parent.clone(), label, name.clone());
                    children.push(name);
                }
            }
            level = children;
        }
        let spec = b.build().expect("generated tree is valid");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = spec.len();
        let weights = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let centres = (0..n).map(|_| (0..dims).map(|_| rng.random_range(-0.8..0.8)).collect()).collect();
        let offsets = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        Self {
            space: Arc::new(TreeSpace::new(spec)),
            weights,
            centres,
            offsets,
        }
    }

    /// Per-path minimum: the sum of vertex offsets, attained at the centres.
    pub fn path_optimum(&self, leaf: usize) -> f64 {
        self.space.index().leaf_path(leaf).iter().map(|v| self.offsets[v.0]).sum()
    }

    /// `(leaf, values)` of the global minimizer, lowest leaf on ties.
    pub fn argmin(&self) -> (usize, Vec<f64>) {
        let leaf = (0..self.space.n_leaves())
            .min_by(|&a, &b| self.path_optimum(a).total_cmp(&self.path_optimum(b)))
            .expect("a tree has at least one leaf");
        let values = self.space.index().leaf_path(leaf).iter().flat_map(|v| self.centres[v.0].clone()).collect();
        (leaf, values)
    }

    fn value(&self, leaf: usize, values: &[f64]) -> f64 {
        let mut at = 0;
        let mut total = 0.0;
        for &VertexId(v) in self.space.index().leaf_path(leaf) {
            let c = &self.centres[v];
            let sq: f64 = values[at..at + c.len()].iter().zip(c).map(|(x, m)| (x - m) * (x - m)).sum();
            at += c.len();
            total += self.weights[v] * sq + self.offsets[v];
        }
        total
    }
}

impl Objective for RandomTreeObjective {
    fn name(&self) -> &str {
        "random-tree"
    }

    fn space(&self) -> &Arc<TreeSpace<f64>> {
        &self.space
    }

    fn evaluate(&self, leaf: usize, values: &[f64]) -> Result<f64, ObjectiveError> {
        check_input(&self.space, leaf, values)?;
        Ok(self.value(leaf, values))
    }

    fn known_optimum(&self) -> Option<f64> {
        Some(self.path_optimum(self.argmin().0))
    }
}

#[derive(Serialize)]
struct ExternalQuery<'a> {
    leaf: usize,
    values: &'a [f64],
}

/// Objective evaluated by a child process: one JSON object
/// `{"leaf": …, "values": […]}` on stdin, one number on stdout.
#[derive(Debug, Clone)]
pub struct ExternalObjective {
    name: String,
    space: Arc<TreeSpace<f64>>,
    program: String,
    args: Vec<String>,
    known_optimum: Option<f64>,
}

impl ExternalObjective {
    pub fn new(space: Arc<TreeSpace<f64>>, program: impl Into<String>, args: Vec<String>) -> Self {
        let program = program.into();
        Self {
            name: program.clone(),
            space,
            program,
            args,
            known_optimum: None,
        }
    }

    pub fn with_known_optimum(mut self, value: f64) -> Self {
        self.known_optimum = Some(value);
        self
    }

    fn fail(&self, reason: impl Into<String>) -> ObjectiveError {
        ObjectiveError::External {
            command: self.program.clone(),
            reason: reason.into(),
        }
    }
}

impl Objective for ExternalObjective {
    fn name(&self) -> &str {
        &self.name
    }

    fn space(&self) -> &Arc<TreeSpace<f64>> {
        &self.space
    }

    fn evaluate(&self, leaf: usize, values: &[f64]) -> Result<f64, ObjectiveError> {
        check_input(&self.space, leaf, values)?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| self.fail(format!("spawn failed: {e}")))?;
        let query = serde_json::to_vec(&ExternalQuery { leaf, values }).expect("query serializes");
        {
            let mut stdin = child.stdin.take().expect("stdin is piped");
            stdin.write_all(&query).map_err(|e| self.fail(format!("writing stdin: {e}")))?;
        }
        let out = child.wait_with_output().map_err(|e| self.fail(format!("waiting: {e}")))?;
        if !out.status.success() {
            return Err(self.fail(format!(
                "exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let y: f64 = text
            .trim()
            .parse()
            .map_err(|_| self.fail(format!("expected a number on stdout, got {:?}", text.trim())))?;
        if !y.is_finite() {
            return Err(ObjectiveError::NonFinite(y));
        }
        Ok(y)
    }

    fn known_optimum(&self) -> Option<f64> {
        self.known_optimum
    }
}

/// Looks up a builtin objective by name.
pub fn builtin(name: &str) -> Result<Box<dyn Objective>, ObjectiveError> {
    match name {
        "jenatton" => Ok(Box::new(jenatton_objective())),
        "random" | "random-tree" => Ok(Box::new(RandomTreeObjective::new(3, 2, 2, 0))),
        other => Err(ObjectiveError::UnknownBuiltin(other.to_string())),
    }
}
