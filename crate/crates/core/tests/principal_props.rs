use green_contract::agent::{best_response, Incentives};
use green_contract::model::presets::*;
use green_contract::model::GovPrefs;
use green_contract::principal::{optimize_pointwise, script_h, PrincipalSettings};
use nalgebra::DVector;
use proptest::prelude::*;

fn gov(target: f64, kappa: f64, nu: f64) -> GovPrefs {
    GovPrefs { targets: DVector::from_vec(vec![target]), kappa, nu, kappa_in_h: true }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn optimum_dominates_pass_through(t in 0.0f64..1.0, target in 0.0f64..4.0, kappa in 0.0f64..1.0) {
        let model = reference_market();
        let prefs = reference_investor();
        let g = gov(target, kappa, 1.0);
        let opt = optimize_pointwise(&model, &prefs, &g, t, &PrincipalSettings::default(), None).unwrap();
        let pass = Incentives::pass_through(3);
        let p = best_response(&model, &prefs, t, &pass).unwrap().p_hat;
        prop_assert!(opt.value >= script_h(&model, &prefs, &g, t, &pass, &p).unwrap() - 1e-9);
    }

    #[test]
    fn green_holding_approaches_target_with_weight(t in 0.0f64..1.0, target in 0.0f64..4.0) {
        let model = reference_market();
        let prefs = reference_investor();
        let gap: Vec<f64> = [0.0, 0.4, 0.8]
            .iter()
            .map(|&k| {
                let o = optimize_pointwise(&model, &prefs, &gov(target, k, 1.0), t, &PrincipalSettings::default(), None).unwrap();
                (target - o.response.p_hat[0]).abs()
            })
            .collect();
        prop_assert!(gap[1] <= gap[0] + 1e-4 && gap[2] <= gap[1] + 1e-4, "{gap:?}");
    }

    #[test]
    fn residual_risk_lowers_criterion(
        t in 0.0f64..1.0,
        params in prop::collection::vec(-2.0f64..2.0, Incentives::n_params(3)),
        p in prop::collection::vec(0.5f64..9.5, 4),
    ) {
        let model = reference_market();
        let prefs = reference_investor();
        let inc = Incentives::from_params(3, &DVector::from_vec(params));
        let p = DVector::from_vec(p);
        let lo = script_h(&model, &prefs, &gov(0.0, 0.0, 1.0), t, &inc, &p).unwrap();
        let hi = script_h(&model, &prefs, &gov(0.0, 0.0, 2.0), t, &inc, &p).unwrap();
        // The residual exposure is nonzero unless z = e₁, which has measure zero here.
        prop_assert!(hi < lo);
    }
}
