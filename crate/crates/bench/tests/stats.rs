use addtree_bench::{ks_uniform_distance, wilcoxon_one_sided, StatsError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Upper-tail p-value by enumerating all 2ⁿ sign assignments of the ranks.
fn brute_force_p(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = d.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[idx[j + 1]].abs() == d[idx[i]].abs() {
            j += 1;
        }
        for k in i..=j {
            ranks[idx[k]] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    let observed: f64 = (0..n).filter(|&k| d[k] > 0.0).map(|k| ranks[k]).sum();
    let hits = (0u32..1 << n)
        .filter(|mask| (0..n).filter(|&k| mask >> k & 1 == 1).map(|k| ranks[k]).sum::<f64>() >= observed - 1e-9)
        .count();
    hits as f64 / f64::from(1u32 << n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_p_matches_enumeration(seed in any::<u64>(), n in 5usize..=12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Coarse values produce ties in |a - b|.
        let a: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(-4i32..5))).collect();
        let b: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(-4i32..5))).collect();
        match wilcoxon_one_sided(&a, &b) {
            Ok(w) => {
                prop_assert!(w.exact);
                let p = brute_force_p(&a, &b);
                prop_assert!((w.p_value - p).abs() < 1e-12, "{} vs {}", w.p_value, p);
            }
            Err(StatsError::AllZero | StatsError::TooFewPairs(_)) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn shifting_a_up_never_raises_p(seed in any::<u64>(), shift in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..15).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.sample(StandardNormal)).collect();
        let up: Vec<f64> = a.iter().map(|x| x + shift).collect();
        let p0 = wilcoxon_one_sided(&a, &b).unwrap().p_value;
        let p1 = wilcoxon_one_sided(&up, &b).unwrap().p_value;
        prop_assert!(p1 <= p0 + 1e-12);
    }
}

#[test]
fn full_dominance_on_ten_pairs_is_one_over_1024() {
    let a = [3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
    let b = [0.0; 10];
    let w = wilcoxon_one_sided(&a, &b).unwrap();
    assert_eq!(w.p_value, 1.0 / 1024.0);
    assert_eq!(w.statistic, 55.0);
}

#[test]
fn equal_samples_are_undefined() {
    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert!(matches!(wilcoxon_one_sided(&a, &a), Err(StatsError::AllZero)));
}

fn null_ks(n: usize, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps: Vec<f64> = (0..trials)
        .map(|_| {
            let a: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            wilcoxon_one_sided(&a, &b).unwrap().p_value
        })
        .collect();
    ks_uniform_distance(&ps)
}

#[test]
fn null_p_values_are_uniform_in_both_regimes() {
    let exact = null_ks(20, 10_000, 1);
    let approx = null_ks(40, 10_000, 2);
    assert!(exact <= 0.05, "exact regime D = {exact}");
    assert!(approx <= 0.05, "normal regime D = {approx}");
}

#[test]
fn ks_distance_of_a_grid_is_half_a_step() {
    let grid: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
    assert!((ks_uniform_distance(&grid) - 0.005).abs() < 1e-12);
}
