//! Monte Carlo engine: correlated market paths, portfolio paths under a
//! holdings policy, value estimators for both parties and the comparison with
//! a flat green tax rebate.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DVector;
use rayon::prelude::*;

use crate::agent::tax_best_response;
use crate::contract::{ContractPlan, QvMode};
use crate::error::{Error, Result};
use crate::linalg::{mean_stderr, pairwise_sum, psd_sqrt};
use crate::model::{GovPrefs, InvestorPrefs, MarketModel};
use crate::principal::IncentiveSchedule;
use crate::rng::normal_block;

/// Short-rate dynamics for the green bond, used when the market is simulated
/// with a stochastic green rate.
#[derive(Clone, Debug, PartialEq)]
pub enum RateDrift {
    /// `θ (m − r)`.
    Ou { theta: f64, m: f64 },
    /// `r̄'(t) + θ (r̄(t) − r)` around the deterministic green rate curve `r̄`.
    CurveReverting { theta: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateModel {
    pub drift: RateDrift,
    pub sigma_r: f64,
}

impl RateModel {
    /// Drift of the green short rate at `(t, r)`.
    pub fn drift_at(&self, model: &MarketModel, t: f64, r: f64) -> f64 {
        match self.drift {
            RateDrift::Ou { theta, m } => theta * (m - r),
            RateDrift::CurveReverting { theta } => {
                let g = &model.green[0];
                let c = model.coefficient_scale;
                let curve = c * g.rate.eval(g.maturity, t);
                -c * g.rate.b + theta * (curve - r)
            }
        }
    }
}

/// Simulated market scenarios. Per-path arrays are laid out
/// `[path][step][source]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBundle {
    pub seed: u64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub n_sources: usize,
    pub antithetic: bool,
    pub times: Vec<f64>,
    /// Correlated Brownian increments.
    pub dw: Vec<f64>,
    /// Return increments `dR = m dt + σ dW`.
    pub returns: Vec<f64>,
    /// Volatility per `[step][source]` at the left endpoint.
    pub vol: Vec<f64>,
    /// Green short rate per `[path][node]`, present when simulated with a rate model.
    pub rate: Option<Vec<f64>>,
}

impl PathBundle {
    pub fn dt(&self, step: usize) -> f64 {
        self.times[step + 1] - self.times[step]
    }

    fn idx(&self, path: usize, step: usize) -> usize {
        (path * self.n_steps + step) * self.n_sources
    }

    pub fn dw_at(&self, path: usize, step: usize) -> &[f64] {
        let i = self.idx(path, step);
        &self.dw[i..i + self.n_sources]
    }

    pub fn returns_at(&self, path: usize, step: usize) -> &[f64] {
        let i = self.idx(path, step);
        &self.returns[i..i + self.n_sources]
    }

    pub fn vol_at(&self, step: usize) -> &[f64] {
        &self.vol[step * self.n_sources..(step + 1) * self.n_sources]
    }

    /// Log-price increment `dR − ½σ² dt`.
    pub fn log_price_increment(&self, path: usize, step: usize, source: usize) -> f64 {
        let s = self.vol_at(step)[source];
        self.returns_at(path, step)[source] - 0.5 * s * s * self.dt(step)
    }

    /// Same scenarios on a grid `factor` times coarser (increments summed).
    pub fn coarsen(&self, factor: usize) -> Result<PathBundle> {
        if factor == 0 || self.n_steps % factor != 0 {
            return Err(Error::GridMismatch(format!("cannot coarsen {} steps by {factor}", self.n_steps)));
        }
        if self.rate.is_some() {
            return Err(Error::GridMismatch("coarsening a bundle with a rate path is not supported".into()));
        }
        let n_steps = self.n_steps / factor;
        let ns = self.n_sources;
        let mut dw = vec![0.0; self.n_paths * n_steps * ns];
        let mut returns = vec![0.0; self.n_paths * n_steps * ns];
        for p in 0..self.n_paths {
            for k in 0..n_steps {
                for j in 0..factor {
                    let src = self.idx(p, k * factor + j);
                    let dst = (p * n_steps + k) * ns;
                    for s in 0..ns {
                        dw[dst + s] += self.dw[src + s];
                        returns[dst + s] += self.returns[src + s];
                    }
                }
            }
        }
        let vol = (0..n_steps).flat_map(|k| self.vol_at(k * factor).to_vec()).collect();
        Ok(PathBundle {
            seed: self.seed,
            n_paths: self.n_paths,
            n_steps,
            n_sources: ns,
            antithetic: self.antithetic,
            times: (0..=n_steps).map(|k| self.times[k * factor]).collect(),
            dw,
            returns,
            vol,
            rate: None,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SimulationOptions {
    pub antithetic: bool,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        SimulationOptions { antithetic: false }
    }
}

/// Euler scheme on returns with correlated normals from the symmetric square
/// root of the correlation matrix.
pub fn simulate_market(model: &MarketModel, n_paths: usize, n_steps: usize, seed: u64) -> Result<PathBundle> {
    simulate_market_with(model, n_paths, n_steps, seed, SimulationOptions::default(), None)
}

/// As [`simulate_market`], optionally with antithetic pairs and a stochastic
/// green short rate driven by an extra independent Brownian motion.
pub fn simulate_market_with(
    model: &MarketModel,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
    opts: SimulationOptions,
    rate: Option<&RateModel>,
) -> Result<PathBundle> {
    if n_steps == 0 || n_paths == 0 {
        return Err(Error::InvalidParameter("need at least one path and one step".into()));
    }
    let ns = model.n_sources();
    let d_g = model.d_g();
    let l = psd_sqrt(&model.correlation, 1e-10)?;
    let times: Vec<f64> = (0..=n_steps).map(|k| model.horizon * k as f64 / n_steps as f64).collect();
    let snaps: Vec<_> = (0..n_steps).map(|k| model.coefficients_at(times[k])).collect();
    let drift: Vec<f64> = snaps.iter().flat_map(|s| s.drift().iter().copied().collect::<Vec<_>>()).collect();
    let vol: Vec<f64> = snaps.iter().flat_map(|s| s.vol().iter().copied().collect::<Vec<_>>()).collect();
    let width = if rate.is_some() { ns + 1 } else { ns };

    let per_path: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let (stream, sign) = if opts.antithetic { ((p / 2) as u64, if p % 2 == 1 { -1.0 } else { 1.0 }) } else { (p as u64, 1.0) };
            let mut z = vec![0.0; width];
            let mut dw = vec![0.0; n_steps * ns];
            let mut ret = vec![0.0; n_steps * ns];
            let mut r_path = Vec::new();
            let mut r = 0.0;
            if rate.is_some() {
                r = snaps[0].r_g[0];
                r_path.reserve(n_steps + 1);
                r_path.push(r);
            }
            for k in 0..n_steps {
                let dt = times[k + 1] - times[k];
                let sq = dt.sqrt();
                normal_block(seed, stream, k as u64, &mut z);
                for i in 0..ns {
                    let mut acc = 0.0;
                    for j in 0..ns {
                        acc += l[(i, j)] * z[j];
                    }
                    let w = sign * acc * sq;
                    let s = vol[k * ns + i];
                    let mut m = drift[k * ns + i];
                    if rate.is_some() && i < d_g {
                        m += r - snaps[k].r_g[i];
                    }
                    dw[k * ns + i] = w;
                    ret[k * ns + i] = m * dt + s * w;
                }
                if let Some(rm) = rate {
                    r += rm.drift_at(model, times[k], r) * dt + rm.sigma_r * sign * z[ns] * sq;
                    r_path.push(r);
                }
            }
            (dw, ret, r_path)
        })
        .collect();

    let mut dw = Vec::with_capacity(n_paths * n_steps * ns);
    let mut returns = Vec::with_capacity(n_paths * n_steps * ns);
    let mut rates = rate.map(|_| Vec::with_capacity(n_paths * (n_steps + 1)));
    for (a, b, c) in per_path {
        dw.extend(a);
        returns.extend(b);
        if let Some(r) = rates.as_mut() {
            r.extend(c);
        }
    }
    Ok(PathBundle { seed, n_paths, n_steps, n_sources: ns, antithetic: opts.antithetic, times, dw, returns, vol, rate: rates })
}

/// Holdings per simulation step, `[step][source]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub holdings: Vec<DVector<f64>>,
}

impl Policy {
    pub fn constant(p: DVector<f64>, n_steps: usize) -> Self {
        Policy { holdings: vec![p; n_steps] }
    }

    pub fn from_schedule(schedule: &IncentiveSchedule, n_steps: usize) -> Result<Self> {
        let holdings =
            (0..n_steps).map(|k| schedule.node_for_step(k, n_steps).map(|n| n.p.clone())).collect::<Result<Vec<_>>>()?;
        Ok(Policy { holdings })
    }
}

/// Portfolio value paths `[path][node]`, `X₀ = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct PortfolioPaths {
    pub n_paths: usize,
    pub n_nodes: usize,
    pub x: Vec<f64>,
}

impl PortfolioPaths {
    pub fn at(&self, path: usize, node: usize) -> f64 {
        self.x[path * self.n_nodes + node]
    }

    pub fn terminal(&self) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.at(p, self.n_nodes - 1)).collect()
    }
}

pub fn simulate_portfolio(model: &MarketModel, bundle: &PathBundle, policy: &Policy) -> Result<PortfolioPaths> {
    if policy.holdings.len() != bundle.n_steps {
        return Err(Error::GridMismatch(format!(
            "policy has {} steps, bundle has {}",
            policy.holdings.len(),
            bundle.n_steps
        )));
    }
    for p in &policy.holdings {
        model.control_box.check(p)?;
    }
    let nn = bundle.n_steps + 1;
    let x: Vec<f64> = (0..bundle.n_paths)
        .into_par_iter()
        .flat_map_iter(|path| {
            let mut out = Vec::with_capacity(nn);
            let mut x = 0.0;
            out.push(x);
            for k in 0..bundle.n_steps {
                let r = bundle.returns_at(path, k);
                x += policy.holdings[k].iter().zip(r).map(|(a, b)| a * b).sum::<f64>();
                out.push(x);
            }
            out
        })
        .collect();
    Ok(PortfolioPaths { n_paths: bundle.n_paths, n_nodes: nn, x })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let (mean, std_err) = mean_stderr(xs);
        Estimate { mean, std_err }
    }

    /// |mean − target| in units of the standard error.
    pub fn z_score(&self, target: f64) -> f64 {
        (self.mean - target).abs() / self.std_err
    }
}

/// Agent's expected utility `E[−exp(−γ(ξ − ∫k dt))]` under the schedule.
pub fn estimate_agent_value(
    model: &MarketModel,
    prefs: &InvestorPrefs,
    schedule: &IncentiveSchedule,
    bundle: &PathBundle,
) -> Result<Estimate> {
    let plan = ContractPlan::new(model, prefs, schedule, bundle)?;
    let cost = plan.cost_integral_with(prefs);
    let y0 = 0.0;
    let vals: Vec<f64> = (0..bundle.n_paths)
        .into_par_iter()
        .map(|p| -(-prefs.gamma * (plan.terminal(bundle, p, y0, QvMode::Analytic) - cost)).exp())
        .collect();
    Ok(Estimate::from_samples(&vals))
}

/// Principal's expected utility `E[U_P(X_T − ∫w Σ(G − π)² dt − ξ)]`.
pub fn estimate_principal_value(
    model: &MarketModel,
    prefs: &InvestorPrefs,
    gov: &GovPrefs,
    schedule: &IncentiveSchedule,
    bundle: &PathBundle,
) -> Result<Estimate> {
    let plan = ContractPlan::new(model, prefs, schedule, bundle)?;
    let penalty: f64 = (0..bundle.n_steps).map(|k| gov.target_penalty(&plan.steps[k].p) * bundle.dt(k)).sum();
    let policy = plan.policy();
    let x = simulate_portfolio(model, bundle, &policy)?;
    let vals: Vec<f64> = (0..bundle.n_paths)
        .into_par_iter()
        .map(|p| {
            let xi = plan.terminal(bundle, p, 0.0, QvMode::Analytic);
            -(-gov.nu * (x.at(p, bundle.n_steps) - penalty - xi)).exp()
        })
        .collect();
    Ok(Estimate::from_samples(&vals))
}

/// Rebate per unit of green holding that makes the investor hold
/// `target_green` in total across green bonds.
pub fn calibrate_tax_rate(model: &MarketModel, prefs: &InvestorPrefs, target_green: f64) -> Result<f64> {
    let d_g = model.d_g();
    let bx = model.control_box;
    let min: f64 = (0..d_g).map(|i| bx.clamp(prefs.alpha[i])).sum();
    let max = d_g as f64 * bx.upper;
    if !(target_green >= min - 1e-12 && target_green <= max) {
        return Err(Error::UnreachableTarget { target: target_green, min, max });
    }
    let total = |c: f64| -> Result<f64> { Ok(tax_best_response(model, prefs, c)?.rows(0, d_g).sum()) };
    if target_green <= min {
        return Ok(0.0);
    }
    // Interior first-order condition: Σ (αᵢ + c/βᵢ) = target.
    let inv_beta: f64 = (0..d_g).map(|i| 1.0 / prefs.beta[i]).sum();
    let alpha_sum: f64 = (0..d_g).map(|i| prefs.alpha[i]).sum();
    let c = (target_green - alpha_sum) / inv_beta;
    if c.is_finite() && c >= 0.0 && (total(c)? - target_green).abs() <= 1e-12 * (1.0 + target_green) {
        return Ok(c);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while total(hi)? < target_green {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::UnreachableTarget { target: target_green, min, max });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid)? < target_green {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Optimal contract against a flat green rebate on common scenarios.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub times: Vec<f64>,
    /// Mean of `X^contract_t − X^tax_t`.
    pub mean_diff: Vec<f64>,
    /// `mean_diff` over the baseline portfolio value (capital invested plus
    /// mean P&L), in percent.
    pub rel_diff_pct: Vec<f64>,
    pub std_err: Vec<f64>,
    /// Total green holdings per step under each policy.
    pub green_contract: Vec<f64>,
    pub green_tax: Vec<f64>,
    /// Time-averaged green holdings under the contract minus under the tax.
    pub green_gap: f64,
    pub tax_rate: f64,
}

pub fn compare_policies(
    model: &MarketModel,
    prefs: &InvestorPrefs,
    schedule: &IncentiveSchedule,
    tax_rate: f64,
    bundle: &PathBundle,
) -> Result<ComparisonReport> {
    let d_g = model.d_g();
    let contract_policy = ContractPlan::new(model, prefs, schedule, bundle)?.policy();
    let tax_p = tax_best_response(model, prefs, tax_rate)?;
    let tax_policy = Policy::constant(tax_p.clone(), bundle.n_steps);
    let xc = simulate_portfolio(model, bundle, &contract_policy)?;
    let xt = simulate_portfolio(model, bundle, &tax_policy)?;
    let capital: f64 = tax_p.sum();

    let nn = bundle.n_steps + 1;
    let mut mean_diff = Vec::with_capacity(nn);
    let mut rel = Vec::with_capacity(nn);
    let mut se = Vec::with_capacity(nn);
    for k in 0..nn {
        let diffs: Vec<f64> = (0..bundle.n_paths).map(|p| xc.at(p, k) - xt.at(p, k)).collect();
        let base: Vec<f64> = (0..bundle.n_paths).map(|p| xt.at(p, k)).collect();
        let e = Estimate::from_samples(&diffs);
        let base_value = capital + pairwise_sum(&base) / bundle.n_paths as f64;
        mean_diff.push(e.mean);
        se.push(e.std_err);
        rel.push(100.0 * e.mean / base_value.abs());
    }
    let green = |p: &DVector<f64>| p.rows(0, d_g).sum();
    let green_contract: Vec<f64> = contract_policy.holdings.iter().map(green).collect();
    let green_tax: Vec<f64> = tax_policy.holdings.iter().map(green).collect();
    let n = green_contract.len() as f64;
    let green_gap = green_contract.iter().sum::<f64>() / n - green_tax.iter().sum::<f64>() / n;
    Ok(ComparisonReport {
        times: bundle.times.clone(),
        mean_diff,
        rel_diff_pct: rel,
        std_err: se,
        green_contract,
        green_tax,
        green_gap,
        tax_rate,
    })
}

impl ComparisonReport {
    pub fn write_csv<W: Write>(&self, provenance: &str, mut out: W) -> Result<()> {
        writeln!(out, "# {provenance}")?;
        writeln!(out, "t,mean_diff,rel_diff_pct,std_err")?;
        for k in 0..self.times.len() {
            writeln!(out, "{:.17e},{:.17e},{:.17e},{:.17e}", self.times[k], self.mean_diff[k], self.rel_diff_pct[k], self.std_err[k])?;
        }
        Ok(())
    }
}

const BUNDLE_MAGIC: &[u8; 4] = b"GCPB";
const BUNDLE_VERSION: u32 = 1;

/// Flat little-endian layout: magic, version, dimensions, seed and flags,
/// then times, volatilities, increments, returns and (optionally) rates as
/// row-major doubles.
pub fn write_bundle<W: Write>(bundle: &PathBundle, mut out: W) -> Result<()> {
    out.write_all(BUNDLE_MAGIC)?;
    out.write_u32::<LittleEndian>(BUNDLE_VERSION)?;
    for v in [bundle.n_paths, bundle.n_steps, bundle.n_sources] {
        out.write_u64::<LittleEndian>(v as u64)?;
    }
    out.write_u64::<LittleEndian>(bundle.seed)?;
    out.write_u8(bundle.antithetic as u8)?;
    out.write_u8(bundle.rate.is_some() as u8)?;
    let write_all = |out: &mut W, xs: &[f64]| -> Result<()> {
        for &x in xs {
            out.write_f64::<LittleEndian>(x)?;
        }
        Ok(())
    };
    write_all(&mut out, &bundle.times)?;
    write_all(&mut out, &bundle.vol)?;
    write_all(&mut out, &bundle.dw)?;
    write_all(&mut out, &bundle.returns)?;
    if let Some(r) = &bundle.rate {
        write_all(&mut out, r)?;
    }
    Ok(())
}

pub fn read_bundle<R: Read>(mut input: R) -> Result<PathBundle> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != BUNDLE_MAGIC {
        return Err(Error::Parse { line: 0, message: "not a path bundle".into() });
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != BUNDLE_VERSION {
        return Err(Error::Parse { line: 0, message: format!("unsupported bundle version {version}") });
    }
    let n_paths = input.read_u64::<LittleEndian>()? as usize;
    let n_steps = input.read_u64::<LittleEndian>()? as usize;
    let n_sources = input.read_u64::<LittleEndian>()? as usize;
    let seed = input.read_u64::<LittleEndian>()?;
    let antithetic = input.read_u8()? != 0;
    let has_rate = input.read_u8()? != 0;
    let mut read_n = |n: usize| -> Result<Vec<f64>> {
        let mut v = vec![0.0; n];
        input.read_f64_into::<LittleEndian>(&mut v)?;
        Ok(v)
    };
    let times = read_n(n_steps + 1)?;
    let vol = read_n(n_steps * n_sources)?;
    let dw = read_n(n_paths * n_steps * n_sources)?;
    let returns = read_n(n_paths * n_steps * n_sources)?;
    let rate = if has_rate { Some(read_n(n_paths * (n_steps + 1))?) } else { None };
    Ok(PathBundle { seed, n_paths, n_steps, n_sources, antithetic, times, dw, returns, vol, rate })
}
