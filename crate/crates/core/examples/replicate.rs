//! Expresses the time-averaged contract as static positions in
//! log-contracts and variance/covariance swaps, and checks the payoff
//! against the contract accumulated along simulated paths.

use green_contract::contract::{replication_positions, ContractPlan, QvMode};
use green_contract::mc::simulate_market;
use green_contract::model::presets::*;
use green_contract::principal::{average_schedule, solve_schedule, PrincipalSettings};

fn main() -> green_contract::error::Result<()> {
    let model = reference_market();
    let prefs = reference_investor();
    let schedule = solve_schedule(&model, &prefs, &reference_government(), 10, &PrincipalSettings::default())?;
    let avg = average_schedule(&model, &prefs, &schedule)?;
    let holdings = avg.mean_response();
    let rep = replication_positions(&model, &avg, &holdings, prefs.gamma);
    for p in &rep.positions {
        println!("{:?} {:?}: {:.5}", p.kind, p.names, p.size);
    }

    let bundle = simulate_market(&model, 200, 400, 7)?;
    let mut plan = ContractPlan::averaged(&model, &prefs, &avg, &bundle)?;
    for s in plan.steps.iter_mut() {
        s.p = holdings.clone();
        s.h = avg.coupon_integral / model.horizon;
    }
    let worst = (0..bundle.n_paths)
        .map(|p| (rep.payoff(&bundle, p, 0.0) - plan.terminal(&bundle, p, 0.0, QvMode::Realized)).abs())
        .fold(0.0, f64::max);
    println!("largest pathwise replication error {worst:.3e}");
    Ok(())
}
