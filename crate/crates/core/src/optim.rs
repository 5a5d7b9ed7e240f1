//! Box-constrained quasi-Newton minimization and multi-start helpers.
//!
//! The local optimizer is a projected L-BFGS: an active-set estimate pins
//! variables sitting on a bound with an outward gradient, the two-loop
//! recursion supplies a direction on the remaining variables, and an Armijo
//! backtracking search runs along the projected path.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::dot;
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("objective is not finite at the starting point")]
    NonFiniteStart,
    #[error("evaluation budget is zero")]
    ZeroBudget,
    #[error("starting point has {got} coordinates but there are {expected} bounds")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("bound {index} is empty or not finite")]
    InvalidBounds { index: usize },
    #[error("no starting points were supplied")]
    NoStarts,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig<T> {
    /// Number of curvature pairs kept.
    pub memory: usize,
    pub max_iters: usize,
    /// Maximum objective evaluations, including the initial one.
    pub max_evals: usize,
    /// Stop when the projected gradient's largest entry falls below this.
    pub gtol: T,
    /// Stop when an accepted step decreases `f` by less than `ftol · max(|f|, 1)`.
    pub ftol: T,
    /// Armijo sufficient-decrease constant.
    pub c1: T,
}

impl<T: Scalar> Default for LbfgsConfig<T> {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 200,
            max_evals: 500,
            gtol: T::lit(1e-6),
            ftol: T::lit(1e-12),
            c1: T::lit(1e-4),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult<T> {
    pub x: Vec<T>,
    pub f: T,
    pub evals: usize,
    pub iters: usize,
    pub converged: bool,
}

fn project<T: Scalar>(x: &mut [T], bounds: &[(T, T)]) {
    for (xi, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *xi = xi.max(lo).min(hi);
    }
}

/// Gradient with components zeroed where the variable is pinned at a bound.
fn projected_gradient<T: Scalar>(x: &[T], g: &[T], bounds: &[(T, T)]) -> Vec<T> {
    x.iter()
        .zip(g)
        .zip(bounds)
        .map(|((&xi, &gi), &(lo, hi))| {
            if (xi <= lo && gi > T::zero()) || (xi >= hi && gi < T::zero()) {
                T::zero()
            } else {
                gi
            }
        })
        .collect()
}

fn check_bounds<T: Scalar>(bounds: &[(T, T)]) -> Result<(), OptimError> {
    for (index, &(lo, hi)) in bounds.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(OptimError::InvalidBounds { index });
        }
    }
    Ok(())
}

/// Minimizes `f` over the box `bounds` starting from `x0` (clamped into the
/// box). `f` returns the objective and writes the gradient into its second
/// argument; a non-finite value rejects the trial point.
pub fn minimize<T, F>(mut f: F, x0: &[T], bounds: &[(T, T)], cfg: &LbfgsConfig<T>) -> Result<OptimResult<T>, OptimError>
where
    T: Scalar,
    F: FnMut(&[T], &mut [T]) -> T,
{
    let n = bounds.len();
    if x0.len() != n {
        return Err(OptimError::DimensionMismatch {
            expected: n,
            got: x0.len(),
        });
    }
    check_bounds(bounds)?;
    if cfg.max_evals == 0 {
        return Err(OptimError::ZeroBudget);
    }

    let mut x = x0.to_vec();
    project(&mut x, bounds);
    let mut g = vec![T::zero(); n];
    let mut fx = f(&x, &mut g);
    let mut evals = 1;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::NonFiniteStart);
    }

    let mut history: VecDeque<(Vec<T>, Vec<T>, T)> = VecDeque::with_capacity(cfg.memory);
    let mut x_new = vec![T::zero(); n];
    let mut g_new = vec![T::zero(); n];
    let mut iters = 0;
    let mut converged = false;

    while iters < cfg.max_iters && evals < cfg.max_evals {
        let pg = projected_gradient(&x, &g, bounds);
        let pg_norm = pg.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        if pg_norm <= cfg.gtol {
            converged = true;
            break;
        }
        let free: Vec<bool> = pg.iter().map(|v| *v != T::zero()).collect();

        // Two-loop recursion restricted to free variables.
        let mut d: Vec<T> = pg.iter().map(|&v| -v).collect();
        if !history.is_empty() {
            let masked = |v: &[T]| -> Vec<T> {
                v.iter()
                    .zip(&free)
                    .map(|(&x, &keep)| if keep { x } else { T::zero() })
                    .collect()
            };
            let mut q = pg.clone();
            let mut alphas = Vec::with_capacity(history.len());
            for (s, y, rho) in history.iter().rev() {
                let s = masked(s);
                let a = *rho * dot(&s, &q);
                for (qi, yi) in q.iter_mut().zip(masked(y)) {
                    *qi -= a * yi;
                }
                alphas.push(a);
            }
            let (s_last, y_last, _) = history.back().unwrap();
            let (s_last, y_last) = (masked(s_last), masked(y_last));
            let yy = dot(&y_last, &y_last);
            let gamma = if yy > T::zero() { dot(&s_last, &y_last) / yy } else { T::one() };
            let gamma = if gamma > T::zero() && gamma.is_finite() { gamma } else { T::one() };
            q.iter_mut().for_each(|v| *v *= gamma);
            for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
                let b = *rho * dot(&masked(y), &q);
                for (qi, si) in q.iter_mut().zip(masked(s)) {
                    *qi += (a - b) * si;
                }
            }
            let cand: Vec<T> = q.iter().zip(&free).map(|(&v, &keep)| if keep { -v } else { T::zero() }).collect();
            if dot(&cand, &g) < T::zero() && cand.iter().all(|v| v.is_finite()) {
                d = cand;
            } else {
                history.clear();
            }
        }

        let d_norm = d.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let mut step = if history.is_empty() {
            T::one().min(T::one() / d_norm)
        } else {
            T::one()
        };

        let mut accepted = false;
        for _ in 0..40 {
            if evals >= cfg.max_evals {
                break;
            }
            for i in 0..n {
                x_new[i] = x[i] + step * d[i];
            }
            project(&mut x_new, bounds);
            let dx: Vec<T> = x_new.iter().zip(&x).map(|(a, b)| *a - *b).collect();
            if dx.iter().all(|v| *v == T::zero()) {
                break;
            }
            let f_new = f(&x_new, &mut g_new);
            evals += 1;
            let decrease = cfg.c1 * dot(&g, &dx);
            if f_new.is_finite() && g_new.iter().all(|v| v.is_finite()) && f_new <= fx + decrease {
                let s = dx;
                let y: Vec<T> = g_new.iter().zip(&g).map(|(a, b)| *a - *b).collect();
                let sy = dot(&s, &y);
                if sy > T::epsilon() * dot(&y, &y) {
                    if history.len() == cfg.memory {
                        history.pop_front();
                    }
                    if cfg.memory > 0 {
                        history.push_back((s, y, T::one() / sy));
                    }
                }
                let small = fx - f_new <= cfg.ftol * fx.abs().max(T::one());
                std::mem::swap(&mut x, &mut x_new);
                std::mem::swap(&mut g, &mut g_new);
                fx = f_new;
                accepted = true;
                if small {
                    converged = true;
                }
                break;
            }
            step *= T::lit(0.5);
        }
        iters += 1;
        if converged {
            break;
        }
        if !accepted {
            if history.is_empty() {
                break;
            }
            history.clear();
        }
    }

    Ok(OptimResult {
        x,
        f: fx,
        evals,
        iters,
        converged,
    })
}

/// Runs [`minimize`] from every start and keeps the lowest objective; ties go
/// to the earliest start. Fails only when every start fails, with the last
/// error.
pub fn minimize_multistart<T, F>(
    mut f: F,
    starts: &[Vec<T>],
    bounds: &[(T, T)],
    cfg: &LbfgsConfig<T>,
) -> Result<OptimResult<T>, OptimError>
where
    T: Scalar,
    F: FnMut(&[T], &mut [T]) -> T,
{
    let mut best: Option<OptimResult<T>> = None;
    let mut last_err = OptimError::NoStarts;
    for x0 in starts {
        match minimize(&mut f, x0, bounds, cfg) {
            Ok(r) => {
                if best.as_ref().map_or(true, |b| r.f < b.f) {
                    best = Some(r);
                }
            }
            Err(e) => last_err = e,
        }
    }
    best.ok_or(last_err)
}

const PRIMES: [u32; 32] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109,
    113, 127, 131,
];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// `n` points of a Halton sequence in `[0, 1)^dim`, rotated by a random
/// shift drawn from `seed` (Cranley-Patterson). Dimensions beyond the
/// prime table fall back to uniform draws.
pub fn halton(dim: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
    (0..n)
        .map(|i| {
            (0..dim)
                .map(|d| match PRIMES.get(d) {
                    Some(&p) => (radical_inverse(i as u64 + 1, p as u64) + shift[d]).fract(),
                    None => rng.random::<f64>(),
                })
                .collect()
        })
        .collect()
}

/// Maps unit-cube points onto `bounds`.
pub fn scale_to_box<T: Scalar>(unit: &[f64], bounds: &[(T, T)]) -> Vec<T> {
    unit.iter()
        .zip(bounds)
        .map(|(&u, &(lo, hi))| lo + (hi - lo) * T::lit(u))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn solves_rosenbrock() {
        let cfg = LbfgsConfig {
            max_iters: 1000,
            max_evals: 5000,
            ..Default::default()
        };
        let r = minimize(rosenbrock, &[-1.2, 1.0], &[(-5.0, 5.0), (-5.0, 5.0)], &cfg).unwrap();
        assert_relative_eq!(r.x[0], 1.0, epsilon = 1e-4);
        assert_relative_eq!(r.x[1], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn stops_on_active_bound() {
        // Unconstrained minimum at (2, -3); the box clips both coordinates.
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * (x[0] - 2.0);
            g[1] = 2.0 * (x[1] + 3.0);
            (x[0] - 2.0).powi(2) + (x[1] + 3.0).powi(2)
        };
        let r = minimize(f, &[0.0, 0.0], &[(-1.0, 1.0), (-1.0, 1.0)], &LbfgsConfig::default()).unwrap();
        assert_eq!(r.x, vec![1.0, -1.0]);
        assert!(r.converged);
    }

    #[test]
    fn errors() {
        let f = |_: &[f64], _: &mut [f64]| f64::NAN;
        assert_eq!(
            minimize(f, &[0.0], &[(0.0, 1.0)], &LbfgsConfig::default()),
            Err(OptimError::NonFiniteStart)
        );
        let ok = |x: &[f64], g: &mut [f64]| {
            g[0] = 1.0;
            x[0]
        };
        let cfg = LbfgsConfig {
            max_evals: 0,
            ..Default::default()
        };
        assert_eq!(minimize(ok, &[0.0], &[(0.0, 1.0)], &cfg), Err(OptimError::ZeroBudget));
        assert!(matches!(
            minimize(ok, &[0.0, 1.0], &[(0.0, 1.0)], &LbfgsConfig::default()),
            Err(OptimError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn multistart_finds_global_basin() {
        // Two wells; the deeper one is at x = 2.
        let f = |x: &[f64], g: &mut [f64]| {
            let a = (x[0] + 1.0).powi(2);
            let b = (x[0] - 2.0).powi(2);
            g[0] = 2.0 * (x[0] + 1.0) * b + 2.0 * (x[0] - 2.0) * a - 0.2;
            a * b - 0.2 * x[0]
        };
        let starts: Vec<Vec<f64>> = halton(1, 5, 3).iter().map(|u| scale_to_box(u, &[(-3.0, 3.0)])).collect();
        let r = minimize_multistart(f, &starts, &[(-3.0, 3.0)], &LbfgsConfig::default()).unwrap();
        assert!((r.x[0] - 2.0).abs() < 0.1, "{:?}", r.x);
    }

    #[test]
    fn halton_is_deterministic_and_in_unit_cube() {
        let a = halton(3, 20, 7);
        assert_eq!(a, halton(3, 20, 7));
        assert_ne!(a, halton(3, 20, 8));
        assert!(a.iter().flatten().all(|&u| (0.0..1.0).contains(&u)));
    }
}
