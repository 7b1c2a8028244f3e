//! Property tests for the core invariants.

use proptest::prelude::*;
use recourse_core::model::{Classifier, ModelFile, Scorer};
use recourse_core::recourse::{
    CostFn, Direction, FeasibilitySpec, FeatureRule, RecourseAction,
};
use recourse_core::scm::builtin_scm;

fn finite_vec(n: usize, lim: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-lim..lim, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn abduction_roundtrips_on_builtins(
        x2 in finite_vec(2, 5.0),
        x3 in finite_vec(3, 5.0),
        x7 in finite_vec(7, 5.0),
    ) {
        for (name, x) in [
            ("income-savings", &x2),
            ("quadratic", &x2),
            ("imf-3", &x3),
            ("loan-like", &x7),
        ] {
            let scm = builtin_scm::<f64>(name).unwrap();
            let u = scm.abduct(x).unwrap();
            let back = scm.reconstruct(&u).unwrap();
            for (a, b) in x.iter().zip(&back) {
                prop_assert!((a - b).abs() <= 1e-8, "{name}");
            }
        }
    }

    #[test]
    fn null_interventions_are_bitwise_identities(x in finite_vec(2, 5.0)) {
        for name in ["income-savings", "quadratic", "imf-2"] {
            let scm = builtin_scm::<f64>(name).unwrap();
            let null_hard = RecourseAction::new(vec![0, 1], vec![0.0, 0.0]).unwrap();
            let cf = scm.counterfactual_hard(&x, &null_hard).unwrap();
            prop_assert_eq!(&cf, &x);
            let cf = scm.counterfactual_additive(&x, &[0.0, 0.0]).unwrap();
            prop_assert_eq!(&cf, &x);
        }
    }

    #[test]
    fn linear_composition_identity(
        x in finite_vec(2, 3.0),
        delta in finite_vec(2, 1.0),
        theta in -2.0f64..2.0,
        target in 0usize..2,
    ) {
        let scm = builtin_scm::<f64>("income-savings").unwrap();
        let action = RecourseAction::new(vec![target], vec![theta]).unwrap();
        let lhs = scm.apply_action_to_perturbed(&x, &delta, &action).unwrap();
        let base = scm.counterfactual_hard(&x, &action).unwrap();
        let j = scm.interventional_jacobian(&x, &[target]).unwrap();
        for i in 0..2 {
            let jd: f64 = (0..2).map(|c| j[i][c] * delta[c]).sum();
            prop_assert!((lhs[i] - (base[i] + jd)).abs() <= 1e-8);
        }
    }

    #[test]
    fn projection_is_idempotent_and_star_shaped(
        x in finite_vec(3, 2.0),
        theta in finite_vec(3, 4.0),
        scale in 0.0f64..1.0,
    ) {
        let feas = FeasibilitySpec::new(vec![
            FeatureRule {
                name: "a".into(),
                actionable: true,
                direction: Direction::IncreaseOnly,
                min: None,
                max: Some(2.5),
            },
            FeatureRule {
                name: "b".into(),
                actionable: true,
                direction: Direction::Free,
                min: Some(-2.5),
                max: Some(2.5),
            },
            FeatureRule {
                name: "c".into(),
                actionable: false,
                direction: Direction::Free,
                min: None,
                max: None,
            },
        ])
        .unwrap();
        let idx = [0usize, 1, 2];
        let mut projected = theta.clone();
        feas.project(&x, &idx, &mut projected);
        let once = projected.clone();
        feas.project(&x, &idx, &mut projected);
        prop_assert_eq!(&once, &projected);

        // The projected action is feasible, and so is any scaling of it
        // toward the null action.
        let action = RecourseAction::new(idx.to_vec(), once.clone()).unwrap();
        prop_assert!(feas.is_feasible(&x, &action));
        let scaled: Vec<f64> = once.iter().map(|t| t * scale).collect();
        let action = RecourseAction::new(idx.to_vec(), scaled).unwrap();
        prop_assert!(feas.is_feasible(&x, &action));
    }

    #[test]
    fn l1_cost_axioms(a in finite_vec(4, 3.0), b in finite_vec(4, 3.0)) {
        let cost = CostFn::l1();
        prop_assert_eq!(cost.eval::<f64>(&[0.0; 4]), 0.0);
        prop_assert!(cost.eval(&a) >= 0.0);
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        prop_assert!(cost.eval(&sum) <= cost.eval(&a) + cost.eval(&b) + 1e-12);
        // Coordinate-wise shrink toward zero never increases cost.
        let mut shrunk = a.clone();
        shrunk[0] *= 0.5;
        prop_assert!(cost.eval(&shrunk) <= cost.eval(&a) + 1e-12);
    }

    #[test]
    fn model_files_roundtrip_bit_exactly(
        w in finite_vec(3, 4.0),
        bias in -2.0f64..2.0,
        threshold in 0.05f64..0.95,
    ) {
        let c = Classifier::new_linear(w, bias, threshold).unwrap();
        let json = serde_json::to_string(&c.to_file()).unwrap();
        let parsed: ModelFile = serde_json::from_str(&json).unwrap();
        let back: Classifier<f64> = Classifier::from_file(parsed).unwrap();
        let json2 = serde_json::to_string(&back.to_file()).unwrap();
        prop_assert_eq!(json, json2);
        prop_assert_eq!(c.threshold(), back.threshold());
    }
}
