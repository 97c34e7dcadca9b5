use green_contract::agent::{best_response, h_obs, lattice_max, Incentives, ObsQuadratic};
use green_contract::linalg::SymMatrix;
use green_contract::model::presets::*;
use green_contract::model::{eval_coefficients, InvestorPrefs};
use nalgebra::DVector;
use proptest::prelude::*;

fn incentives(scale: f64) -> impl Strategy<Value = Incentives> {
    prop::collection::vec(-scale..scale, Incentives::n_params(3)).prop_map(|v| Incentives::from_params(3, &DVector::from_vec(v)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn response_dominates_lattice(t in 0.0f64..1.0, inc in incentives(2.0)) {
        let model = reference_market();
        let prefs = reference_investor();
        let r = best_response(&model, &prefs, t, &inc).unwrap();
        let snap = eval_coefficients(&model, t).unwrap();
        let quad = ObsQuadratic::new(&snap, &model.correlation, &prefs, &inc, model.mode);
        prop_assert!(r.h_value + 1e-9 >= lattice_max(&quad, &model.control_box, 9));
        for &x in r.p_hat.iter() {
            prop_assert!(x >= model.control_box.epsilon && x <= model.control_box.upper);
        }
    }

    #[test]
    fn contractible_incentives_are_irrelevant_without_curvature(
        t in 0.0f64..1.0,
        zx in -2.0f64..2.0,
        zg in -5.0f64..5.0,
        zi in -5.0f64..5.0,
    ) {
        let model = reference_market();
        let prefs = reference_investor();
        let mut base = Incentives::zeros(3);
        base.z[0] = zx;
        let mut moved = base.clone();
        moved.z[1] = zg;
        moved.z[2] = zi;
        let a = best_response(&model, &prefs, t, &base).unwrap();
        let b = best_response(&model, &prefs, t, &moved).unwrap();
        prop_assert_eq!(a.p_hat, b.p_hat);
        prop_assert_eq!(a.h_value, b.h_value);
    }

    #[test]
    fn interior_displacement_scales_with_incentive_over_cost(t in 0.0f64..1.0, zx in 0.0f64..0.5) {
        let model = reference_market();
        let prefs = reference_investor();
        let doubled_cost = InvestorPrefs { beta: &prefs.beta * 2.0, ..prefs.clone() };
        let inc = |z: f64| Incentives { z: DVector::from_vec(vec![z, 0.0, 0.0]), g: SymMatrix::zeros(3) };
        let p1 = best_response(&model, &prefs, t, &inc(zx)).unwrap().p_hat;
        let p2 = best_response(&model, &prefs, t, &inc(2.0 * zx)).unwrap().p_hat;
        let p22 = best_response(&model, &doubled_cost, t, &inc(2.0 * zx)).unwrap().p_hat;
        let bx = model.control_box;
        for i in 0..4 {
            let interior = |x: f64| x > bx.epsilon + 1e-9 && x < bx.upper - 1e-9;
            if interior(p1[i]) && interior(p2[i]) && interior(p22[i]) {
                let d1 = p1[i] - prefs.alpha[i];
                prop_assert!((p2[i] - prefs.alpha[i] - 2.0 * d1).abs() <= 1e-8 * (1.0 + d1.abs()));
                prop_assert!((p22[i] - p1[i]).abs() <= 1e-8 * (1.0 + d1.abs()));
            }
        }
    }

    #[test]
    fn concavity_probe(t in 0.0f64..1.0, inc in incentives(10.0), ends in prop::collection::vec(0.01f64..10.0, 8)) {
        let model = reference_market();
        let prefs = reference_investor();
        let a = DVector::from_vec(ends[..4].to_vec());
        let b = DVector::from_vec(ends[4..].to_vec());
        let mid = (&a + &b) * 0.5;
        let h = |p: &DVector<f64>| h_obs(&model, &prefs, t, &inc, p).unwrap();
        if h(&mid) < h(&a).min(h(&b)) {
            let r = best_response(&model, &prefs, t, &inc).unwrap();
            prop_assert!(r.diagnostics.used_grid_refine);
        }
    }
}
