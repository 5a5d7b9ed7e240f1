use std::sync::Arc;

use addtree::TreeSpace;
use addtree_bench::{
    builtin, jenatton_objective, jenatton_spec, ExternalObjective, FnObjective, NoiseModel, Objective, ObjectiveError,
    RandomTreeObjective,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn jenatton_optimum_is_never_undershot(seed in any::<u64>()) {
        let f = jenatton_objective();
        let s = f.space().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for leaf in 0..s.n_leaves() {
            let v = s.sample_values(leaf, &mut rng);
            prop_assert!(f.evaluate(leaf, &v).unwrap() >= 0.1);
        }
    }

    #[test]
    fn random_tree_minimum_is_closed_form(seed in any::<u64>(), sample in any::<u64>()) {
        let f = RandomTreeObjective::new(3, 2, 2, seed);
        let (leaf, at) = f.argmin();
        let best = f.known_optimum().unwrap();
        prop_assert!((f.evaluate(leaf, &at).unwrap() - best).abs() < 1e-12);
        let s = f.space().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(sample);
        for l in 0..s.n_leaves() {
            let v = s.sample_values(l, &mut rng);
            prop_assert!(f.evaluate(l, &v).unwrap() >= f.path_optimum(l) - 1e-12);
            prop_assert!(f.path_optimum(l) >= best);
        }
    }
}

#[test]
fn jenatton_reaches_its_optimum_on_the_first_leaf() {
    let f = jenatton_objective();
    assert_eq!(f.evaluate(0, &[0.0, 0.0]).unwrap(), 0.1);
    assert_eq!(f.known_optimum(), Some(0.1));
}

#[test]
fn out_of_bounds_input_is_rejected() {
    let f = jenatton_objective();
    assert!(matches!(f.evaluate(0, &[0.0, 1.5]), Err(ObjectiveError::Point(_))));
    assert!(matches!(f.evaluate(9, &[0.0, 0.0]), Err(ObjectiveError::Point(_))));
    assert!(matches!(f.evaluate(0, &[0.0]), Err(ObjectiveError::Point(_))));
}

#[test]
fn noise_is_a_function_of_input_and_seed() {
    let space = Arc::new(TreeSpace::new(jenatton_spec()));
    let noisy = |seed| {
        FnObjective::new("flat", space.clone(), |_, _| 1.0).with_noise(NoiseModel { std: 0.1, seed })
    };
    let (a, b) = (noisy(4), noisy(4));
    let x = [0.3, -0.2];
    assert_eq!(a.evaluate(1, &x).unwrap(), b.evaluate(1, &x).unwrap());
    assert_ne!(a.evaluate(1, &x).unwrap(), noisy(5).evaluate(1, &x).unwrap());
    assert_ne!(a.evaluate(1, &x).unwrap(), a.evaluate(2, &x).unwrap());
}

#[test]
fn builtins_resolve_by_name() {
    assert_eq!(builtin("jenatton").unwrap().name(), "jenatton");
    assert!(builtin("random").unwrap().known_optimum().is_some());
    assert!(matches!(builtin("nope"), Err(ObjectiveError::UnknownBuiltin(_))));
}

fn shell(script: &str) -> ExternalObjective {
    let space = Arc::new(TreeSpace::new(jenatton_spec()));
    ExternalObjective::new(space, "sh", vec!["-c".into(), script.into()])
}

#[cfg(unix)]
#[test]
fn external_objective_round_trips_through_a_process() {
    let f = shell(r#"read q; case "$q" in *'"leaf":1'*) echo 2.5 ;; *) echo " 1.5 " ;; esac"#);
    assert_eq!(f.evaluate(1, &[0.5, 0.25]).unwrap(), 2.5);
    assert_eq!(f.evaluate(0, &[0.5, 0.25]).unwrap(), 1.5);
}

#[cfg(unix)]
#[test]
fn external_failures_are_reported() {
    let err = shell("cat >/dev/null; echo boom >&2; exit 3").evaluate(0, &[0.0, 0.0]).unwrap_err();
    assert!(err.to_string().contains("boom"), "{err}");
    let err = shell("cat >/dev/null; echo many words").evaluate(0, &[0.0, 0.0]).unwrap_err();
    assert!(matches!(err, ObjectiveError::External { .. }), "{err}");
    let err = shell("cat >/dev/null; echo NaN").evaluate(0, &[0.0, 0.0]).unwrap_err();
    assert!(matches!(err, ObjectiveError::NonFinite(_)), "{err}");
    let missing = ExternalObjective::new(Arc::new(TreeSpace::new(jenatton_spec())), "/no/such/program", vec![]);
    assert!(missing.evaluate(0, &[0.0, 0.0]).is_err());
}
