//! Acceptance suite. Every criterion prints one `PASS` or `FAIL` line with
//! the measured quantities and then asserts.

use std::time::{Duration, Instant};

use chrono::NaiveDate;
use green_contract::agent::{best_response, h_obs, h_obs_gradient, lattice_max, Incentives, ObsQuadratic};
use green_contract::calibration::{
    balanced_signs, fit_affine, fit_ou, synthetic_affine_series, synthetic_ou, AffineFit, OuParams,
};
use green_contract::contract::{replication_positions, ContractPlan, QvMode};
use green_contract::hjb::{extract_policy, solve_hjb, GridSteps, HjbGrid, HjbSettings, RateDrift, RateModel};
use green_contract::mc::{
    calibrate_tax_rate, compare_policies, estimate_agent_value, estimate_principal_value, simulate_market,
    simulate_portfolio, Policy,
};
use green_contract::model::presets::*;
use green_contract::model::{eval_coefficients, AffineCoeff, GovPrefs};
use green_contract::principal::{
    average_schedule, principal_utility, script_h_gradient, solve_schedule, IncentiveSchedule, PrincipalSettings,
};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 42;
const N_PATHS: usize = 10_000;
const N_STEPS: usize = 100;
const M: usize = 10;

fn verdict(id: usize, name: &str, pass: bool, elapsed: Duration, detail: &str) -> bool {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("{tag} criterion {id:>2} ({name}): {detail} [{:.2} s]", elapsed.as_secs_f64());
    pass
}

fn schedule(gov: &GovPrefs) -> IncentiveSchedule {
    solve_schedule(&reference_market(), &reference_investor(), gov, M, &PrincipalSettings::default()).unwrap()
}

fn green_target(kappa: f64) -> GovPrefs {
    GovPrefs { kappa, ..green_target_government() }
}

#[test]
fn criterion_01_no_contract_baseline() {
    let start = Instant::now();
    let model = reference_market();
    let prefs = reference_investor();
    let expected = [0.2, 0.2, 0.3, 0.5];
    let mut worst: f64 = 0.0;
    for &t in &[0.0, 0.5, 1.0] {
        let r = best_response(&model, &prefs, t, &Incentives::zeros(model.n_obs())).unwrap();
        for (a, b) in r.p_hat.iter().zip(expected) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-9 && elapsed < Duration::from_secs(1);
    assert!(verdict(1, "no-contract baseline", pass, elapsed, &format!("max |π̂ − (0.2, 0.2, 0.3, 0.5)| = {worst:.2e}")));
}

#[test]
fn criterion_02_agent_indifference() {
    let start = Instant::now();
    let model = reference_market();
    let sched = schedule(&reference_government());
    let bundle = simulate_market(&model, N_PATHS, N_STEPS, SEED).unwrap();
    let est = estimate_agent_value(&model, &reference_investor(), &sched, &bundle).unwrap();
    let z = est.z_score(-1.0);
    let elapsed = start.elapsed();
    let pass = z <= 3.0 && elapsed < Duration::from_secs(60);
    let detail = format!("E[U_A] = {:.4} ± {:.4}, |z| = {z:.2} against −1", est.mean, est.std_err);
    assert!(verdict(2, "agent indifference", pass, elapsed, &detail));
}

#[test]
fn criterion_03_principal_certainty_equivalent() {
    let start = Instant::now();
    let model = reference_market();
    let prefs = reference_investor();
    let gov = reference_government();
    let sched = schedule(&gov);
    let bundle = simulate_market(&model, N_PATHS, N_STEPS, SEED).unwrap();
    let plan = ContractPlan::new(&model, &prefs, &sched, &bundle).unwrap();
    let target = principal_utility(plan.script_h_integral(&prefs, &gov), &gov);
    let est = estimate_principal_value(&model, &prefs, &gov, &sched, &bundle).unwrap();
    let z = est.z_score(target);
    let elapsed = start.elapsed();
    let pass = z <= 3.0 && elapsed < Duration::from_secs(120);
    let detail = format!("E[U_P] = {:.4e} ± {:.2e}, target {target:.4e}, |z| = {z:.2}", est.mean, est.std_err);
    assert!(verdict(3, "principal certainty equivalent", pass, elapsed, &detail));
}

#[test]
fn criterion_04_reference_signs() {
    let start = Instant::now();
    let sched = schedule(&reference_government());
    let mut pass = true;
    let (mut worst_ratio, mut min_zx, mut min_green): (f64, f64, f64) = (0.0, f64::INFINITY, f64::INFINITY);
    for n in &sched.nodes {
        let z = &n.incentives.z;
        let ratio = z[1].abs().max(z[2].abs()) / z[0];
        pass &= z[0] > 0.0 && ratio <= 0.05 && n.p[0] > 0.2;
        worst_ratio = worst_ratio.max(ratio);
        min_zx = min_zx.min(z[0]);
        min_green = min_green.min(n.p[0]);
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(60);
    let detail = format!(
        "min z_X = {min_zx:.4}, max |z_g|,|z_I| / z_X = {worst_ratio:.2e}, min green π = {min_green:.4} over {} nodes",
        sched.nodes.len()
    );
    assert!(verdict(4, "reference signs", pass, elapsed, &detail));
}

#[test]
fn criterion_05_green_target_response() {
    let start = Instant::now();
    let reference = schedule(&reference_government());
    let sweep: Vec<IncentiveSchedule> = [0.0, 0.4, 0.8].iter().map(|&k| schedule(&green_target(k))).collect();
    let target = &sweep[2];
    let above = reference.nodes.iter().zip(&target.nodes).all(|(r, t)| t.p[0] > r.p[0]);
    let mut worst_drop: f64 = 0.0;
    for w in sweep.windows(2) {
        for (lo, hi) in w[0].nodes.iter().zip(&w[1].nodes) {
            worst_drop = worst_drop.max(lo.p[0] - hi.p[0]);
        }
    }
    let elapsed = start.elapsed();
    let pass = above && worst_drop <= 1e-4 && elapsed < Duration::from_secs(180);
    let detail = format!(
        "green π at t=0: reference {:.4}, κ = 0 / 0.4 / 0.8 → {:.4} / {:.4} / {:.4}; largest decrease along κ {worst_drop:.2e}",
        reference.nodes[0].p[0], sweep[0].nodes[0].p[0], sweep[1].nodes[0].p[0], sweep[2].nodes[0].p[0]
    );
    assert!(verdict(5, "green-target response", pass, elapsed, &detail));
}

#[test]
fn criterion_06_tax_dominance() {
    let start = Instant::now();
    let model = reference_market();
    let prefs = reference_investor();
    let sched = schedule(&reference_government());
    let mean_green = sched.trapezoid(|n| n.p[0]) / sched.horizon();
    let c = calibrate_tax_rate(&model, &prefs, mean_green).unwrap();
    let bundle = simulate_market(&model, N_PATHS, N_STEPS, SEED).unwrap();
    let rep = compare_policies(&model, &prefs, &sched, c, &bundle).unwrap();
    let last = rep.times.len() - 1;
    let confident = rep.mean_diff[last] > 1.645 * rep.std_err[last];
    let increasing = rep.rel_diff_pct.windows(2).all(|w| w[1] > w[0]);
    let elapsed = start.elapsed();
    let pass = confident && increasing && elapsed < Duration::from_secs(180);
    let detail = format!(
        "c = {c:.4}, terminal mean diff {:.4} (SE {:.4}), relative diff increasing: {increasing}; headline diagnostic: terminal relative difference {:.1}%",
        rep.mean_diff[last], rep.std_err[last], rep.rel_diff_pct[last]
    );
    assert!(verdict(6, "tax-policy dominance", pass, elapsed, &detail));
}

/// Realized quadratic variation of `X` sampled every `factor` fine steps,
/// averaged over paths.
fn realized_qv(x: &green_contract::mc::PortfolioPaths, n_fine: usize, factor: usize) -> f64 {
    let total: f64 = (0..x.n_paths)
        .map(|p| (0..n_fine / factor).map(|k| (x.at(p, (k + 1) * factor) - x.at(p, k * factor)).powi(2)).sum::<f64>())
        .sum();
    total / x.n_paths as f64
}

#[test]
fn criterion_07_quadratic_variation_fidelity() {
    let start = Instant::now();
    let model = reference_market();
    let sched = schedule(&reference_government());
    let n_fine = 1600;
    let bundle = simulate_market(&model, 1000, n_fine, SEED).unwrap();
    let policy = Policy::from_schedule(&sched, n_fine).unwrap();
    let x = simulate_portfolio(&model, &bundle, &policy).unwrap();
    // The simulated X is an Euler process with coefficients frozen on each
    // fine step, so its quadratic variation is the fine left sum of A₁₁.
    let analytic: f64 = (0..n_fine)
        .map(|k| {
            let snap = eval_coefficients(&model, bundle.times[k]).unwrap();
            let so = snap.sigma_obs(&policy.holdings[k], model.mode);
            (&so * &model.correlation * so.transpose())[(0, 0)] * bundle.dt(k)
        })
        .sum();
    let grids = [100, 200, 400];
    let bias: Vec<f64> = grids.iter().map(|&n| realized_qv(&x, n_fine, n_fine / n) - analytic).collect();
    let halvings: Vec<f64> = bias.windows(2).map(|w| w[1] / w[0]).collect();
    let elapsed = start.elapsed();
    let pass = bias.iter().all(|b| *b > 0.0)
        && halvings.iter().all(|h| (h - 0.5).abs() <= 0.3 * 0.5)
        && elapsed < Duration::from_secs(60);
    let detail = format!(
        "analytic ⟨X⟩_T = {analytic:.4}, bias at {grids:?} steps = {:.4?}, bias(Δt/2)/bias(Δt) = {:.3?}",
        bias, halvings
    );
    assert!(verdict(7, "quadratic-variation fidelity", pass, elapsed, &detail));
}

#[test]
fn criterion_08_replication_reconstruction() {
    let start = Instant::now();
    let model = reference_market();
    let prefs = reference_investor();
    let sched = schedule(&reference_government());
    let avg = average_schedule(&model, &prefs, &sched).unwrap();
    let holdings = avg.mean_response();
    let rep = replication_positions(&model, &avg, &holdings, prefs.gamma);
    let fine = simulate_market(&model, 500, 400, SEED).unwrap();

    let grids = [50, 100, 200, 400];
    let mut rms = Vec::new();
    for &n in &grids {
        let bundle = fine.coarsen(400 / n).unwrap();
        // The averaged contract written on the observables, with the
        // portfolio held at the replication holdings, realized brackets and
        // the same coupon.
        let mut plan = ContractPlan::averaged(&model, &prefs, &avg, &bundle).unwrap();
        for s in plan.steps.iter_mut() {
            s.p = holdings.clone();
            s.mu_obs = s.snap.mu_obs(&s.p, model.mode);
            s.sigma_obs = s.snap.sigma_obs(&s.p, model.mode);
            s.a = &s.sigma_obs * &model.correlation * s.sigma_obs.transpose();
            s.h = avg.coupon_integral / model.horizon;
        }
        let sq: f64 = (0..bundle.n_paths)
            .map(|p| (rep.payoff(&bundle, p, 0.0) - plan.terminal(&bundle, p, 0.0, QvMode::Realized)).powi(2))
            .sum();
        rms.push((sq / bundle.n_paths as f64).sqrt());
    }
    let ratios: Vec<f64> = rms.windows(2).map(|w| w[0] / w[1]).collect();
    let elapsed = start.elapsed();
    let pass = ratios.iter().all(|r| (1.5..=2.5).contains(r)) && elapsed < Duration::from_secs(60);
    let rms_text: Vec<String> = rms.iter().map(|e| format!("{e:.3e}")).collect();
    let detail = format!("RMS pathwise error at {grids:?} steps = {rms_text:?}, halving ratios {ratios:.3?}");
    assert!(verdict(8, "replication reconstruction", pass, elapsed, &detail));
}

fn random_incentives(rng: &mut ChaCha8Rng, n_obs: usize) -> Incentives {
    let theta = DVector::from_fn(Incentives::n_params(n_obs), |_, _| rng.gen_range(-2.0..2.0));
    Incentives::from_params(n_obs, &theta)
}

fn relative_gap(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-12)
}

#[test]
fn criterion_09_gradient_suite() {
    let start = Instant::now();
    let model = reference_market();
    let prefs = reference_investor();
    let gov = green_target_government();
    let n_obs = model.n_obs();
    let n = model.n_sources();
    let step = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut worst_h, mut worst_script, mut worst_lattice): (f64, f64, f64) = (0.0, 0.0, f64::NEG_INFINITY);

    for _ in 0..20 {
        let t = rng.gen_range(0.0..model.horizon);
        let inc = random_incentives(&mut rng, n_obs);
        let p = DVector::from_fn(n, |_, _| rng.gen_range(0.5..9.5));
        let grad = h_obs_gradient(&model, &prefs, t, &inc, &p).unwrap();
        let fd = DVector::from_fn(n, |i, _| {
            let (mut up, mut dn) = (p.clone(), p.clone());
            up[i] += step;
            dn[i] -= step;
            (h_obs(&model, &prefs, t, &inc, &up).unwrap() - h_obs(&model, &prefs, t, &inc, &dn).unwrap()) / (2.0 * step)
        });
        worst_h = worst_h.max(relative_gap(&grad, &fd));

        let snap = eval_coefficients(&model, t).unwrap();
        let quad = ObsQuadratic::new(&snap, &model.correlation, &prefs, &inc, model.mode);
        let best = best_response(&model, &prefs, t, &inc).unwrap().h_value;
        let lattice = lattice_max(&quad, &model.control_box, 9);
        worst_lattice = worst_lattice.max(lattice - best);
    }

    for _ in 0..20 {
        let t = rng.gen_range(0.0..model.horizon);
        let inc = random_incentives(&mut rng, n_obs);
        let theta = inc.to_params();
        let (_, grad) = script_h_gradient(&model, &prefs, &gov, t, &inc).unwrap();
        let value = |th: &DVector<f64>| script_h_gradient(&model, &prefs, &gov, t, &Incentives::from_params(n_obs, th)).unwrap().0;
        let fd = DVector::from_fn(theta.len(), |i, _| {
            let (mut up, mut dn) = (theta.clone(), theta.clone());
            up[i] += step;
            dn[i] -= step;
            (value(&up) - value(&dn)) / (2.0 * step)
        });
        worst_script = worst_script.max(relative_gap(&grad, &fd));
    }

    let elapsed = start.elapsed();
    let pass = worst_h <= 1e-4 && worst_script <= 1e-4 && worst_lattice <= 1e-9 && elapsed < Duration::from_secs(60);
    let detail = format!(
        "worst relative gap: h^obs {worst_h:.2e}, 𝓗 {worst_script:.2e}; max (lattice − best response) {worst_lattice:.2e}"
    );
    assert!(verdict(9, "gradient suite", pass, elapsed, &detail));
}

fn frozen_rate() -> RateModel {
    RateModel { drift: RateDrift::Ou { theta: 0.0, m: 0.0 }, sigma_r: 0.0 }
}

/// Solves the frozen-rate HJB on `steps` and returns the worst relative
/// deviation of the extracted policy from the deterministic schedule,
/// together with `U(0)` and the certainty equivalent.
fn degenerate_hjb(steps: GridSteps, n_paths: usize) -> (f64, f64, f64) {
    let model = reference_market();
    let prefs = reference_investor();
    let gov = reference_government();
    let sched = solve_schedule(&model, &prefs, &gov, steps.time, &PrincipalSettings::default()).unwrap();
    let pol: Vec<_> = sched.nodes.iter().map(|n| (n.t, n.p.clone())).collect();
    let grid = HjbGrid::from_steps(&model, &pol, &frozen_rate(), steps).unwrap();
    let sol = solve_hjb(&model, &prefs, &gov, &frozen_rate(), &grid, &HjbSettings::default()).unwrap();
    let mut worst: f64 = 0.0;
    if n_paths > 0 {
        let bundle = simulate_market(&model, n_paths, steps.time * 5, SEED).unwrap();
        let fp = extract_policy(&sol, &bundle).unwrap();
        for path in 0..fp.n_paths {
            for s in 0..fp.n_steps {
                let node = sched.node_for_step(s, fp.n_steps).unwrap();
                for (a, b) in fp.holding(path, s).iter().zip(node.p.iter()) {
                    worst = worst.max((a - b).abs() / b.abs());
                }
            }
        }
    }
    (worst, sol.u0(), sol.certainty_equivalent())
}

#[test]
fn criterion_10_hjb_degenerate_limit() {
    let start = Instant::now();
    let mut footnote = GridSteps::FOOTNOTE;
    footnote.r = 0;
    let (err_1, ..) = degenerate_hjb(footnote, 200);
    let (err_2, ..) = degenerate_hjb(footnote.refined(2), 200);

    let base = GridSteps { time: 10, x: 8, w_g: 4, r: 0, w_i: 4 };
    let levels: Vec<(f64, f64)> = [1, 2, 4]
        .iter()
        .map(|&k| {
            let (_, u, ce) = degenerate_hjb(base.refined(k), 0);
            (u, ce)
        })
        .collect();
    let u_ratio = (levels[0].0 - levels[1].0) / (levels[1].0 - levels[2].0);
    let ce_ratio = (levels[0].1 - levels[1].1) / (levels[1].1 - levels[2].1);

    let elapsed = start.elapsed();
    let pass = err_1 <= 0.10 && err_2 <= 0.05 && (1.5..=2.5).contains(&u_ratio) && elapsed < Duration::from_secs(900);
    let detail = format!(
        "policy error footnote grid {err_1:.2e}, doubled grid {err_2:.2e}; U(0) increment ratio {u_ratio:.3}, CE increment ratio {ce_ratio:.3}"
    );
    assert!(verdict(10, "HJB degenerate limit", pass, elapsed, &detail));
}

fn affine_truth() -> Vec<(&'static str, f64, AffineFit)> {
    let model = reference_market();
    let s = model.coefficient_scale;
    let scaled = |c: AffineCoeff| AffineCoeff::new(s * c.a, s * c.b);
    let mut out: Vec<(&'static str, f64, AffineFit)> = Vec::new();
    let names = ["GREEN", "CONV_SHORT", "CONV_LONG"];
    for (name, b) in names.iter().zip(model.green.iter().chain(&model.conventional)) {
        out.push((name, b.maturity, AffineFit { rate: scaled(b.rate), premium: b.premium, vol: scaled(b.vol) }));
    }
    let idx = &model.index;
    out.push(("INDEX", idx.maturity, AffineFit { rate: scaled(idx.drift), premium: AffineCoeff::ZERO, vol: scaled(idx.vol) }));
    out
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn criterion_11_calibration_round_trip() {
    let start = Instant::now();
    let start_date = NaiveDate::from_ymd_opt(2023, 1, 2).unwrap();
    // Calendar days keep the spacing uniform, so the balanced innovations
    // cancel exactly against the polynomial drift and volatility terms.
    let dates: Vec<NaiveDate> = start_date.iter_days().take(253).collect();
    let eps = balanced_signs(252);
    let mut worst_affine: f64 = 0.0;
    for (name, maturity, truth) in affine_truth() {
        let series = synthetic_affine_series(name, &truth, maturity, dates.clone(), &eps, 100.0).unwrap();
        let fit = fit_affine(&series, truth.premium).unwrap();
        for (f, t) in [(fit.rate, truth.rate), (fit.vol, truth.vol)] {
            worst_affine = worst_affine.max(rel(f.a, t.a)).max(rel(f.b, t.b));
        }
    }
    let affine_pass = worst_affine <= 0.05;

    let truth = OuParams { theta: 0.4, m: 0.04, sigma: 0.02 };
    let dt = 1.0 / 252.0;
    let path = synthetic_ou(truth, truth.m, dt, 5 * 252 + 1, SEED);
    let est = fit_ou(&path, dt).unwrap();
    let errs = [rel(est.theta, truth.theta), rel(est.m, truth.m), rel(est.sigma, truth.sigma)];
    let ou_pass = errs[0] <= 0.20 && errs[1] <= 0.10 && errs[2] <= 0.05;

    let elapsed = start.elapsed();
    let pass = affine_pass && ou_pass && elapsed < Duration::from_secs(60);
    let detail = format!(
        "affine worst relative error {worst_affine:.2e} (≤ 5%: {affine_pass}); OU estimate θ = {:.4}, m = {:.4}, σ = {:.5}, relative errors {:.3?} against (20%, 10%, 5%)",
        est.theta, est.m, est.sigma, errs
    );
    assert!(verdict(11, "calibration round trip", pass, elapsed, &detail));
}
