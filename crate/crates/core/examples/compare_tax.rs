//! Compares the optimal contract against a flat tax on conventional bonds
//! that yields the same initial green holding, on common random numbers.

use green_contract::mc::{calibrate_tax_rate, compare_policies, simulate_market};
use green_contract::model::presets::*;
use green_contract::principal::{solve_schedule, PrincipalSettings};

fn main() -> green_contract::error::Result<()> {
    let model = reference_market();
    let prefs = reference_investor();
    let schedule = solve_schedule(&model, &prefs, &reference_government(), 10, &PrincipalSettings::default())?;
    let c = calibrate_tax_rate(&model, &prefs, schedule.nodes[0].p[0])?;
    let bundle = simulate_market(&model, 5000, 100, 42)?;
    let report = compare_policies(&model, &prefs, &schedule, c, &bundle)?;
    println!("tax rate {c:.4}, mean green gap {:.4}", report.green_gap);
    for k in (0..report.times.len()).step_by(20) {
        println!(
            "t {:.2}: contract − tax {:.4} (SE {:.4}), {:.2}%",
            report.times[k], report.mean_diff[k], report.std_err[k], report.rel_diff_pct[k]
        );
    }
    Ok(())
}
