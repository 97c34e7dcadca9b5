use green_contract::mc::{
    calibrate_tax_rate, compare_policies, simulate_market, simulate_market_with, simulate_portfolio, Estimate, Policy,
    SimulationOptions,
};
use green_contract::model::presets::*;
use green_contract::principal::{solve_schedule, PrincipalSettings};
use nalgebra::DVector;
use proptest::prelude::*;

#[test]
fn comparison_is_reproducible_bit_for_bit() {
    let model = reference_market();
    let prefs = reference_investor();
    let sched = solve_schedule(&model, &prefs, &reference_government(), 5, &PrincipalSettings::default()).unwrap();
    let c = calibrate_tax_rate(&model, &prefs, 1.0).unwrap();
    let run = || {
        let bundle = simulate_market(&model, 300, 20, 17).unwrap();
        compare_policies(&model, &prefs, &sched, c, &bundle).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn increment_covariance_matches_correlation() {
    let model = reference_market();
    let n = 50_000;
    let bundle = simulate_market(&model, n, 4, 23).unwrap();
    let dt = bundle.dt(0);
    let d = model.n_sources();
    for i in 0..d {
        for j in 0..d {
            let cov = (0..n).map(|p| bundle.dw_at(p, 0)[i] * bundle.dw_at(p, 0)[j]).sum::<f64>() / n as f64;
            let expected = model.correlation[(i, j)] * dt;
            assert!((cov - expected).abs() <= 4.0 * dt / (n as f64).sqrt(), "({i},{j}): {cov} vs {expected}");
        }
    }
}

#[test]
fn antithetic_pairs_keep_the_mean_and_cut_variance() {
    let model = reference_market();
    let policy = Policy::constant(DVector::from_vec(vec![1.0, 0.5, 2.0, 1.0]), 50);
    let plain = simulate_market(&model, 4000, 50, 31).unwrap();
    let anti = simulate_market_with(&model, 4000, 50, 31, SimulationOptions { antithetic: true }, None).unwrap();
    let xp = simulate_portfolio(&model, &plain, &policy).unwrap().terminal();
    let xa = simulate_portfolio(&model, &anti, &policy).unwrap().terminal();
    let ep = Estimate::from_samples(&xp);
    // Antithetic draws come in pairs, so the estimator averages pair means.
    let pair_means: Vec<f64> = xa.chunks(2).map(|c| 0.5 * (c[0] + c[1])).collect();
    let ea = Estimate::from_samples(&pair_means);
    let se = (ep.std_err.powi(2) + ea.std_err.powi(2)).sqrt();
    assert!((ep.mean - ea.mean).abs() <= 3.0 * se);
    assert!(ea.std_err < ep.std_err);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn same_seed_same_scenarios(seed in any::<u64>(), paths in 1usize..20, steps in 1usize..10) {
        let model = reference_market();
        let a = simulate_market(&model, paths, steps, seed).unwrap();
        let b = simulate_market(&model, paths, steps, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn coarsening_preserves_terminal_portfolio(seed in any::<u64>(), factor in 1usize..5) {
        let model = reference_market();
        let fine = simulate_market(&model, 8, 12 * factor, seed).unwrap();
        let coarse = fine.coarsen(factor).unwrap();
        let p = DVector::from_vec(vec![0.3, 1.0, 2.0, 0.7]);
        let xf = simulate_portfolio(&model, &fine, &Policy::constant(p.clone(), fine.n_steps)).unwrap().terminal();
        let xc = simulate_portfolio(&model, &coarse, &Policy::constant(p, coarse.n_steps)).unwrap().terminal();
        for (a, b) in xf.iter().zip(&xc) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn standard_errors_are_positive(xs in prop::collection::vec(-10.0f64..10.0, 2..50)) {
        prop_assume!(xs.iter().any(|x| *x != xs[0]));
        prop_assert!(Estimate::from_samples(&xs).std_err > 0.0);
    }
}
