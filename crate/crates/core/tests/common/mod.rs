#![allow(dead_code)]

use std::sync::Arc;

use addtree::{AddTreeKernel, BaseKernelParams, KernelKind, LinearizedPoint, Matrix, TreeSpace, TreeSpec, ZeroDimPolicy};
use rand::Rng;

pub type Space = Arc<TreeSpace<f64>>;

pub fn fig1() -> Space {
    Arc::new(TreeSpace::new(
        TreeSpec::builder()
            .vertex("r", vec![(-1.0, 1.0); 2])
            .vertex("p1", vec![(-1.0, 1.0); 2])
            .vertex("p2", vec![(-1.0, 1.0); 3])
            .edge("r", 0, "p1")
            .edge("r", 1, "p2")
            .build()
            .unwrap(),
    ))
}

/// Depth-3 tree with a dimensionless root, two one-dimensional inner
/// vertices on [0, 1] and four one-dimensional leaves on [-1, 1].
pub fn jenatton() -> Space {
    Arc::new(TreeSpace::new(
        TreeSpec::builder()
            .vertex("x1", vec![])
            .vertex("x2", vec![(0.0, 1.0)])
            .vertex("x3", vec![(0.0, 1.0)])
            .vertex("x4", vec![(-1.0, 1.0)])
            .vertex("x5", vec![(-1.0, 1.0)])
            .vertex("x6", vec![(-1.0, 1.0)])
            .vertex("x7", vec![(-1.0, 1.0)])
            .edge("x1", 0, "x2")
            .edge("x1", 1, "x3")
            .edge("x2", 0, "x4")
            .edge("x2", 1, "x5")
            .edge("x3", 0, "x6")
            .edge("x3", 1, "x7")
            .build()
            .unwrap(),
    ))
}

/// Random tree of depth at most `max_depth` with fan-out 1..=3 and vertex
/// dimensions 0..=2; the root gets at least `min_root_dim` dimensions.
pub fn random_space<R: Rng>(rng: &mut R, max_depth: usize, min_root_dim: usize) -> Space {
    let mut b = TreeSpec::builder();
    let mut frontier = vec![("v0".to_string(), 0usize)];
    let mut next = 1;
    let root_dim = rng.random_range(min_root_dim..=2.max(min_root_dim));
    b = b.vertex("v0", random_bounds(rng, root_dim));
    while let Some((name, depth)) = frontier.pop() {
        if depth + 1 >= max_depth || rng.random_bool(0.25) {
            continue;
        }
        for label in 0..rng.random_range(1..=3u32) {
            let child = format!("v{next}");
            next += 1;
            let dim = rng.random_range(0..=2);
            b = b.vertex(child.clone(), random_bounds(rng, dim)).edge(name.clone(), label, child.clone());
            frontier.push((child, depth + 1));
        }
    }
    Arc::new(TreeSpace::new(b.build().unwrap()))
}

fn random_bounds<R: Rng>(rng: &mut R, dim: usize) -> Vec<(f64, f64)> {
    (0..dim)
        .map(|_| {
            let lo = rng.random_range(-2.0..1.0);
            (lo, lo + rng.random_range(0.5..2.0))
        })
        .collect()
}

pub fn random_kernel<R: Rng>(space: &Space, rng: &mut R, policy: ZeroDimPolicy) -> AddTreeKernel<f64> {
    let kinds = [KernelKind::SquaredExponential, KernelKind::Matern32, KernelKind::Matern52];
    let params = space
        .spec()
        .vertices()
        .iter()
        .map(|v| {
            BaseKernelParams::new(
                kinds[rng.random_range(0..3)],
                (0..v.dim()).map(|_| rng.random_range(0.2..2.0)).collect(),
                rng.random_range(0.3..2.0),
            )
        })
        .collect();
    AddTreeKernel::with_params(space.clone(), params)
        .unwrap()
        .with_zero_dim_policy(policy)
}

pub fn random_point<R: Rng>(space: &Space, rng: &mut R) -> LinearizedPoint<f64> {
    let leaf = rng.random_range(0..space.n_leaves());
    let values = space.sample_values(leaf, rng);
    space.linearize(leaf, &values).unwrap()
}

pub fn random_points<R: Rng>(space: &Space, rng: &mut R, n: usize) -> Vec<LinearizedPoint<f64>> {
    (0..n).map(|_| random_point(space, rng)).collect()
}

pub fn to_na(m: &Matrix<f64>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Posterior mean and variance from the full noisy Gram matrix, solved by LU.
pub fn full_gram_posterior(
    kernel: &AddTreeKernel<f64>,
    points: &[LinearizedPoint<f64>],
    targets: &[f64],
    noise: &[f64],
    jitter: f64,
    x: &LinearizedPoint<f64>,
) -> (f64, f64) {
    let n = points.len();
    let mut ky = to_na(&kernel.gram(points));
    for i in 0..n {
        ky[(i, i)] += noise[i] + jitter;
    }
    let ks = nalgebra::DVector::from_iterator(n, points.iter().map(|p| kernel.eval(p, x)));
    let lu = ky.lu();
    let y = nalgebra::DVector::from_column_slice(targets);
    let alpha = lu.solve(&y).unwrap();
    let v = lu.solve(&ks).unwrap();
    (ks.dot(&alpha), kernel.eval(x, x) - ks.dot(&v))
}
