//! Solves the government's incentive schedule for the reference market and
//! prints the incentives and induced holdings at each node.

use green_contract::model::presets::*;
use green_contract::principal::{certainty_equivalent, solve_schedule, PrincipalSettings};

fn main() -> green_contract::error::Result<()> {
    let model = reference_market();
    let prefs = reference_investor();
    let gov = reference_government();
    let schedule = solve_schedule(&model, &prefs, &gov, 10, &PrincipalSettings::default())?;
    println!("{:>5} {:>8} {:>8} {:>8}  holdings", "t", "z_X", "z_g", "z_I");
    for n in &schedule.nodes {
        let z = &n.incentives.z;
        println!("{:>5.2} {:>8.4} {:>8.4} {:>8.4}  {:.4?}", n.t, z[0], z[1], z[2], n.p.as_slice());
    }
    println!("certainty equivalent {:.6}", certainty_equivalent(&schedule));
    Ok(())
}
