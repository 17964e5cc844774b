use proptest::prelude::*;
use scmoe_sim::sched::{
    argmin_equivalence, check_random_vectors, choose_slot, makespan_argmin, verify_bounds, CostVector,
};

#[test]
fn thousand_random_vectors() {
    let r = check_random_vectors(1000, 5).unwrap();
    assert_eq!(r.cases, 1000);
    assert!(r.passed(), "{r:?}");
}

#[test]
fn schedule_example_from_json() {
    let c: CostVector = serde_json::from_str(r#"{"comp":[2,3,4],"t_disp":2,"t_comb":7,"t_expert":1}"#).unwrap();
    let ch = choose_slot(&c).unwrap();
    assert_eq!((ch.slot, ch.objective), (1, 0));
    assert_eq!(
        serde_json::to_string(&ch).unwrap(),
        r#"{"slot":1,"objective":0,"makespan":10}"#
    );
}

fn vectors() -> impl Strategy<Value = CostVector> {
    (
        prop::collection::vec(0u64..10_000, 1..10),
        0u64..30_000,
        0u64..30_000,
        0u64..10_000,
    )
        .prop_map(|(comp, d, c, e)| CostVector::new(comp, d, c, e))
}

proptest! {
    #[test]
    fn makespan_is_constant_plus_half_objective(c in vectors()) {
        let base = c.total_comp() + c.t_disp + c.t_comb + 2 * c.t_expert;
        for k in 0..c.slots() {
            prop_assert_eq!(2 * c.makespan(k), base + c.objective(k));
        }
    }

    #[test]
    fn choice_is_minimal_and_bounded(c in vectors()) {
        let ch = choose_slot(&c).unwrap();
        prop_assert!((0..c.slots()).all(|k| c.objective(k) >= ch.objective));
        prop_assert!(verify_bounds(&c, &ch).is_ok());
        prop_assert!(argmin_equivalence(&c).unwrap());
        prop_assert_eq!(makespan_argmin(&c).unwrap(), ch.slot);
    }
}
