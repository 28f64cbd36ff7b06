mod common;

use bolt_core::tensor_store::{apply_task_arithmetic, compute_task_vector, Role};
use bolt_core::{TaskVector, TensorContainer, TensorEntry};
use proptest::prelude::*;

fn arb_value() -> impl Strategy<Value = f64> {
    prop_oneof![
        (-1e3f64..1e3),
        (-1.0f64..1.0, -12i32..12).prop_map(|(m, e)| m * 10f64.powi(e)),
        Just(0.0),
    ]
}

fn checkpoint(id: &str, w: Vec<f64>, b: Vec<f64>) -> TensorContainer {
    TensorContainer::new(id, Role::Checkpoint).with_entries(vec![
        TensorEntry::new("W", vec![3, 4], w).unwrap(),
        TensorEntry::new("b", vec![3], b).unwrap(),
    ])
}

fn arb_checkpoint(id: &'static str) -> impl Strategy<Value = TensorContainer> {
    (prop::collection::vec(arb_value(), 12), prop::collection::vec(arb_value(), 3))
        .prop_map(move |(w, b)| checkpoint(id, w, b))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn single_merge_with_unit_alpha_is_bitwise(base in arb_checkpoint("base"), tuned in arb_checkpoint("tuned")) {
        let tv = compute_task_vector(&tuned, &base).unwrap();
        let merged = apply_task_arithmetic(&base, &[tv], &[1.0]).unwrap();
        prop_assert_eq!(common::payload_bits(&merged), common::payload_bits(&tuned));
    }

    #[test]
    fn delta_is_the_rounded_difference(base in arb_checkpoint("base"), tuned in arb_checkpoint("tuned")) {
        let tv = compute_task_vector(&tuned, &base).unwrap();
        for e in &tv.entries {
            let t = &tuned.get(&e.name).unwrap().data;
            let b = &base.get(&e.name).unwrap().data;
            for k in 0..e.data.len() {
                prop_assert_eq!(e.data[k].to_bits(), (t[k] - b[k]).to_bits());
            }
        }
    }

    #[test]
    fn merge_is_permutation_invariant(
        base in arb_checkpoint("base"),
        a in arb_checkpoint("a"),
        b in arb_checkpoint("b"),
        c in arb_checkpoint("c"),
        alphas in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let tvs: Vec<TaskVector> = [&a, &b, &c].iter().map(|t| compute_task_vector(t, &base).unwrap()).collect();
        let fwd = apply_task_arithmetic(&base, &tvs, &alphas).unwrap();
        let rev_tvs: Vec<TaskVector> = tvs.iter().rev().cloned().collect();
        let rev_alphas: Vec<f64> = alphas.iter().rev().copied().collect();
        let rev = apply_task_arithmetic(&base, &rev_tvs, &rev_alphas).unwrap();
        prop_assert_eq!(common::payload_bits(&fwd), common::payload_bits(&rev));
    }

    #[test]
    fn zero_alphas_return_the_base(base in arb_checkpoint("base"), a in arb_checkpoint("a")) {
        let tv = compute_task_vector(&a, &base).unwrap();
        let merged = apply_task_arithmetic(&base, &[tv], &[0.0]).unwrap();
        prop_assert_eq!(common::payload_bits(&merged), common::payload_bits(&base));
    }

    #[test]
    fn task_vector_container_keeps_residuals(base in arb_checkpoint("base"), a in arb_checkpoint("a")) {
        let tv = compute_task_vector(&a, &base).unwrap();
        let bytes = tv.to_container().to_bytes().unwrap();
        let back = TaskVector::from_container(&TensorContainer::from_bytes(&bytes).unwrap()).unwrap();
        prop_assert_eq!(&back, &tv);
        prop_assert_eq!(back.matrix_layers(), vec!["W".to_string()]);
    }
}
