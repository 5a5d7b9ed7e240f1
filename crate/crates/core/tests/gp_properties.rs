mod common;

use addtree::gp::{fit_hyperparameters, Dataset, FitOptions, GpModel};
use addtree::{AddTreeKernel, KernelKind, Tying, VertexId, ZeroDimPolicy};
use common::{full_gram_posterior, jenatton, random_kernel, random_point, random_points, random_space, to_na};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_model(seed: u64, policy: ZeroDimPolicy, min_root_dim: usize) -> GpModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = random_space(&mut rng, 4, min_root_dim);
    let k = random_kernel(&s, &mut rng, policy);
    let n = rng.random_range(1..=30);
    let pts = random_points(&s, &mut rng, n);
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let noise = rng.random_range(0.01..0.2);
    GpModel::fit(k, Dataset::homoscedastic(pts, y, noise).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn selection_matches_full_gram(seed in any::<u64>(), ignore in any::<bool>()) {
        let policy = if ignore { ZeroDimPolicy::Ignore } else { ZeroDimPolicy::Constant };
        let m = random_model(seed, policy, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let s = m.kernel().space().clone();
        for _ in 0..5 {
            let q = random_point(&s, &mut rng);
            let p = m.posterior(&q);
            let (mean, var) = full_gram_posterior(
                m.kernel(), m.data().points(), m.data().targets(), m.data().noise(), m.jitter(), &q,
            );
            prop_assert!((p.mean - mean).abs() <= 1e-10, "mean {} vs {}", p.mean, mean);
            prop_assert!((p.variance - var.max(0.0)).abs() <= 1e-10, "var {} vs {}", p.variance, var);
            // Rows outside the selection have zero covariance with the query.
            let rows = m.selection(q.active_leaf).rows.to_vec();
            for (i, x) in m.data().points().iter().enumerate() {
                if !rows.contains(&i) {
                    prop_assert_eq!(m.kernel().eval(x, &q), 0.0);
                }
            }
        }
    }

    #[test]
    fn component_means_add_up(seed in any::<u64>(), ignore in any::<bool>()) {
        let policy = if ignore { ZeroDimPolicy::Ignore } else { ZeroDimPolicy::Constant };
        let m = random_model(seed, policy, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdef);
        let s = m.kernel().space().clone();
        for _ in 0..5 {
            let q = random_point(&s, &mut rng);
            let sum: f64 = s
                .index()
                .leaf_path(q.active_leaf)
                .iter()
                .map(|&v| m.component_posterior(v, s.restrict(&q, v).unwrap()).unwrap().mean)
                .sum();
            let full = m.posterior(&q).mean;
            prop_assert!((sum - full).abs() <= 1e-8 * full.abs().max(1.0), "{sum} vs {full}");
        }
    }

    #[test]
    fn variance_never_grows_with_data(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_space(&mut rng, 3, 0);
        let k = random_kernel(&s, &mut rng, ZeroDimPolicy::Constant);
        let pts = random_points(&s, &mut rng, 12);
        let y: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let queries = random_points(&s, &mut rng, 5);
        let mut prev = vec![f64::INFINITY; queries.len()];
        for n in 0..=12 {
            let data = Dataset::homoscedastic(pts[..n].to_vec(), y[..n].to_vec(), 0.05).unwrap();
            let m = GpModel::fit(k.clone(), data).unwrap();
            for (q, p) in queries.iter().zip(prev.iter_mut()) {
                let v = m.posterior(q).variance;
                prop_assert!(v <= *p + 1e-10);
                *p = v;
            }
        }
    }
}

#[test]
fn selection_is_exact_with_continuous_root() {
    // With a continuous root every path intersects, so the selection is
    // everything and must agree with the full Gram.
    for seed in 0..20 {
        let m = random_model(seed, ZeroDimPolicy::Ignore, 1);
        let s = m.kernel().space().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_point(&s, &mut rng);
        assert_eq!(m.selection(q.active_leaf).rows.len(), m.len());
        let p = m.posterior(&q);
        let (mean, var) =
            full_gram_posterior(m.kernel(), m.data().points(), m.data().targets(), m.data().noise(), m.jitter(), &q);
        assert!((p.mean - mean).abs() <= 1e-10);
        assert!((p.variance - var).abs() <= 1e-10);
    }
}

#[test]
fn factorization_reconstructs_gram() {
    let s = jenatton();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = AddTreeKernel::uniform(s.clone(), KernelKind::SquaredExponential, 0.5, 1.0);
    let pts = random_points(&s, &mut rng, 20);
    let y: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let m = GpModel::fit(k, Dataset::homoscedastic(pts, y, 1e-6).unwrap()).unwrap();
    let r = m.cholesky().reconstruct();
    let ky = m.noisy_gram();
    let diff = to_na(&r) - to_na(ky);
    assert!(diff.norm() / to_na(ky).norm() < 1e-8);
}

/// Largest relative error between the analytic gradient and central finite
/// differences (step 1e-5 in log space) over one random instance.
fn gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = random_space(&mut rng, 3, 0);
    let policy = if seed % 2 == 0 { ZeroDimPolicy::Constant } else { ZeroDimPolicy::Ignore };
    let k = random_kernel(&s, &mut rng, policy);
    let n = rng.random_range(2..=25);
    let pts = random_points(&s, &mut rng, n);
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let noise = rng.random_range(0.02..0.3);
    let data = Dataset::homoscedastic(pts, y, noise).unwrap();
    let layout = k.layout(Tying::default());
    let p0 = layout.pack(&k);
    let lml = |p: &[f64], log_noise: f64| {
        let d = data.with_noise(vec![log_noise.exp(); n]).unwrap();
        GpModel::fit(layout.unpack(&k, p), d).unwrap().log_marginal_likelihood()
    };
    let m = GpModel::fit(k.clone(), data.clone()).unwrap();
    let g = m.log_marginal_likelihood_grad(&layout, true);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..=layout.len() {
        let fd = if i < layout.len() {
            let (mut a, mut b) = (p0.clone(), p0.clone());
            a[i] += h;
            b[i] -= h;
            (lml(&a, noise.ln()) - lml(&b, noise.ln())) / (2.0 * h)
        } else {
            (lml(&p0, noise.ln() + h) - lml(&p0, noise.ln() - h)) / (2.0 * h)
        };
        let err = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

#[test]
fn evidence_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let e = gradient_error(seed);
        assert!(e < 1e-5, "seed {seed}: relative error {e}");
    }
}

#[test]
fn optimizing_from_the_truth_does_not_lower_evidence() {
    let s = common::fig1();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let k = AddTreeKernel::uniform(s.clone(), KernelKind::Matern52, 0.6, 1.0);
    let pts = random_points(&s, &mut rng, 30);
    let y: Vec<f64> = pts.iter().map(|p| p.slots.iter().map(|v| v.max(0.0).sin()).sum()).collect();
    let data = Dataset::homoscedastic(pts, y, 0.01).unwrap();
    let start = GpModel::fit(k.clone(), data.clone()).unwrap().log_marginal_likelihood();
    let opts = FitOptions {
        restarts: 1,
        ..FitOptions::default()
    };
    let fit = fit_hyperparameters(&k, &data, &opts).unwrap();
    assert!(fit.log_likelihood >= start);
}

/// Draws `n` noisy samples of a GP with an SE kernel (lengthscale 0.5) on
/// [0, 1] and refits the lengthscale.
fn recovered_lengthscale(seed: u64, n: usize) -> f64 {
    let s = std::sync::Arc::new(addtree::TreeSpace::new(
        addtree::TreeSpec::builder().vertex("x", vec![(0.0, 1.0)]).build().unwrap(),
    ));
    let truth = AddTreeKernel::uniform(s.clone(), KernelKind::SquaredExponential, 0.5, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<_> = (0..n).map(|_| s.linearize(0, &[rng.random::<f64>()]).unwrap()).collect();
    let noise = 1e-2;
    let mut kn = to_na(&truth.gram(&pts));
    for i in 0..n {
        kn[(i, i)] += noise;
    }
    let l = kn.cholesky().unwrap().l();
    let z = nalgebra::DVector::from_iterator(n, (0..n).map(|_| {
        // Box-Muller.
        let (u, v): (f64, f64) = (rng.random::<f64>().max(1e-300), rng.random());
        (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
    }));
    let y = (l * z).iter().copied().collect();
    let data = Dataset::homoscedastic(pts, y, noise).unwrap();
    let template = AddTreeKernel::uniform(s, KernelKind::SquaredExponential, 1.0, 1.0);
    let opts = FitOptions {
        restarts: 3,
        seed,
        ..FitOptions::default()
    };
    fit_hyperparameters(&template, &data, &opts).unwrap().model.kernel().params()[0].lengthscales[0]
}

#[test]
fn recovers_generating_lengthscale() {
    let mut ls: Vec<f64> = (0..10).map(|seed| recovered_lengthscale(seed, 200)).collect();
    ls.sort_by(f64::total_cmp);
    let median = 0.5 * (ls[4] + ls[5]);
    assert!((median - 0.5).abs() <= 0.15, "median lengthscale {median} from {ls:?}");
}

#[test]
fn fitted_noise_stays_in_bounds() {
    let s = jenatton();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts = random_points(&s, &mut rng, 15);
    let y: Vec<f64> = pts.iter().map(|p| p.slots.iter().sum::<f64>()).collect();
    let data = Dataset::homoscedastic(pts, y, 0.0).unwrap();
    let k = AddTreeKernel::uniform(s, KernelKind::Matern52, 0.5, 1.0);
    let opts = FitOptions {
        restarts: 2,
        noise_bounds: Some((1e-6, 1e-1)),
        ..FitOptions::default()
    };
    let fit = fit_hyperparameters(&k, &data, &opts).unwrap();
    let noise = fit.model.homoscedastic_noise().unwrap();
    assert!((1e-6 * (1.0 - 1e-9)..=1e-1 * (1.0 + 1e-9)).contains(&noise), "{noise}");
    for v in (0..7).map(VertexId) {
        for &l in &fit.model.kernel().vertex_params(v).lengthscales {
            assert!((1e-3 * (1.0 - 1e-9)..=1e3 * (1.0 + 1e-9)).contains(&l));
        }
    }
}
