//! Solves the stochastic-rate HJB equation on a coarse grid and compares its
//! value with the deterministic schedule's.

use green_contract::hjb::{solve_hjb, GridSteps, HjbGrid, HjbSettings};
use green_contract::mc::{RateDrift, RateModel};
use green_contract::model::presets::*;
use green_contract::principal::{certainty_equivalent, solve_schedule, PrincipalSettings};

fn main() -> green_contract::error::Result<()> {
    let model = reference_market();
    let prefs = reference_investor();
    let gov = reference_government();
    let schedule = solve_schedule(&model, &prefs, &gov, 10, &PrincipalSettings::default())?;
    let policy: Vec<_> = schedule.nodes.iter().map(|n| (n.t, n.p.clone())).collect();
    let rate = RateModel { drift: RateDrift::Ou { theta: 0.4, m: 0.04 }, sigma_r: 0.02 };
    let steps = GridSteps { time: 10, x: 8, w_g: 4, r: 4, w_i: 4 };
    let grid = HjbGrid::from_steps(&model, &policy, &rate, steps)?;
    let sol = solve_hjb(&model, &prefs, &gov, &rate, &grid, &HjbSettings::default())?;
    println!("HJB: U(0) {:.6e}, certainty equivalent {:.6}", sol.u0(), sol.certainty_equivalent());
    println!("deterministic certainty equivalent {:.6}", certainty_equivalent(&schedule));
    Ok(())
}
