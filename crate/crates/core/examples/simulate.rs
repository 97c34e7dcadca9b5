//! Simulates the portfolio under the optimal contract and reports the mean
//! and spread of its terminal value.

use green_contract::mc::{simulate_market, simulate_portfolio, Estimate, Policy};
use green_contract::model::presets::*;
use green_contract::principal::{solve_schedule, PrincipalSettings};

fn main() -> green_contract::error::Result<()> {
    let model = reference_market();
    let prefs = reference_investor();
    let schedule = solve_schedule(&model, &prefs, &reference_government(), 10, &PrincipalSettings::default())?;
    let bundle = simulate_market(&model, 5000, 100, 42)?;
    let paths = simulate_portfolio(&model, &bundle, &Policy::from_schedule(&schedule, bundle.n_steps)?)?;
    let e = Estimate::from_samples(&paths.terminal());
    println!("terminal P&L {:.4} ± {:.4} over {} paths", e.mean, e.std_err, bundle.n_paths);
    Ok(())
}
