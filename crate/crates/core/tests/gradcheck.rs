mod common;

use common::{build, instance, Objective};
use fsll_core::numerics::finite_difference_check;
use proptest::prelude::*;

fn worst_error(objective: Objective, seed: u64) -> f64 {
    let inst = instance(seed);
    let report = finite_difference_check(|tape, store| build(objective, &inst, tape, store), &inst.store, &[], 1e-6)
        .unwrap();
    assert!(report.checked > 0);
    report.max_relative_error
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn base_cross_entropy(seed in any::<u64>()) {
        prop_assert!(worst_error(Objective::Base, seed) < 1e-4);
    }

    #[test]
    fn triplet(seed in any::<u64>()) {
        prop_assert!(worst_error(Objective::Triplet, seed) < 1e-4);
    }

    #[test]
    fn anchor(seed in any::<u64>()) {
        prop_assert!(worst_error(Objective::Anchor, seed) < 1e-4);
    }

    #[test]
    fn prototype_cosine(seed in any::<u64>()) {
        prop_assert!(worst_error(Objective::Cosine, seed) < 1e-4);
    }

    #[test]
    fn session_total(seed in any::<u64>()) {
        prop_assert!(worst_error(Objective::Session, seed) < 1e-4);
    }

    #[test]
    fn rotation_auxiliary(seed in any::<u64>()) {
        prop_assert!(worst_error(Objective::SelfSupervised, seed) < 1e-4);
    }
}

#[test]
fn cosine_descent_lowers_similarity() {
    use fsll_core::masking::apply_full_update;
    use fsll_core::Tape;
    let inst = instance(11);
    let value = |store: &fsll_core::ParameterStore| {
        let mut tape = Tape::new();
        let root = build(Objective::Cosine, &inst, &mut tape, store).unwrap();
        (tape.value(root).item().unwrap(), tape.backward(root).unwrap())
    };
    let (before, grads) = value(&inst.store);
    let mut store = inst.store.clone();
    apply_full_update(&mut store, &grads, 1e-3).unwrap();
    assert!(value(&store).0 < before);
}
