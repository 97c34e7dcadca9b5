//! Fits the affine rate/volatility model to a synthetic bond price series and
//! an OU model to a synthetic short-rate path.

use chrono::NaiveDate;
use green_contract::calibration::{
    balanced_signs, fit_affine, fit_ou, synthetic_affine_series, synthetic_ou, AffineFit, OuParams,
};
use green_contract::model::AffineCoeff;

fn main() -> green_contract::error::Result<()> {
    let truth = AffineFit {
        rate: AffineCoeff::new(-0.0007, 0.0066),
        premium: AffineCoeff::new(0.38, 0.13),
        vol: AffineCoeff::new(0.0041, 0.0031),
    };
    let dates: Vec<NaiveDate> = NaiveDate::from_ymd_opt(2022, 1, 3).unwrap().iter_days().take(253).collect();
    let series = synthetic_affine_series("GREEN", &truth, 19.73, dates, &balanced_signs(252), 100.0)?;
    let fit = fit_affine(&series, truth.premium)?;
    println!("rate {:?}\nvol  {:?}", fit.rate, fit.vol);

    let dt = 1.0 / 252.0;
    let path = synthetic_ou(OuParams { theta: 0.4, m: 0.04, sigma: 0.02 }, 0.03, dt, 20 * 252 + 1, 42);
    println!("{:?}", fit_ou(&path, dt)?);
    Ok(())
}
