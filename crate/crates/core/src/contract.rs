//! Pathwise contract accumulation and the static replication of the
//! time-averaged contract.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{best_response, Incentives};
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::mc::{PathBundle, Policy};
use crate::model::{cost, eval_coefficients, CoefficientSnapshot, GovPrefs, IndexationMode, InvestorPrefs, MarketModel};
use crate::principal::{script_h_snapshot, AveragedContract, IncentiveSchedule};

/// How the quadratic-variation term of the contract is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QvMode {
    /// Model covariance `Σ^obs Σ Σ^obsᵀ Δt` at the left endpoint.
    Analytic,
    /// Products of the realized observable increments.
    Realized,
}

/// Everything the contract needs on one simulation step.
#[derive(Clone, Debug)]
pub struct PlanStep {
    pub t: f64,
    pub snap: CoefficientSnapshot,
    pub incentives: Incentives,
    /// Agent's best response at `t` to the incentives in force.
    pub p: DVector<f64>,
    pub h: f64,
    pub mu_obs: DVector<f64>,
    pub sigma_obs: DMatrix<f64>,
    pub a: DMatrix<f64>,
    /// `g + γ z zᵀ`.
    pub charge: DMatrix<f64>,
}

/// Incentives in force on each step of a simulation grid, together with the
/// agent's response and the observable coefficients.
#[derive(Clone, Debug)]
pub struct ContractPlan {
    pub mode: IndexationMode,
    pub corr: DMatrix<f64>,
    pub steps: Vec<PlanStep>,
    pub dt: Vec<f64>,
}

impl ContractPlan {
    /// Node `i` of the schedule governs `[tᵢ, tᵢ₊₁)`; on each simulation step
    /// the agent best-responds to the node's incentives at the step's time.
    pub fn new(model: &MarketModel, prefs: &InvestorPrefs, schedule: &IncentiveSchedule, bundle: &PathBundle) -> Result<Self> {
        let incs = (0..bundle.n_steps)
            .map(|k| schedule.node_for_step(k, bundle.n_steps).map(|n| n.incentives.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_incentives(model, prefs, incs, bundle)
    }

    /// Constant averaged incentives on every step.
    pub fn averaged(model: &MarketModel, prefs: &InvestorPrefs, avg: &AveragedContract, bundle: &PathBundle) -> Result<Self> {
        Self::from_incentives(model, prefs, vec![avg.incentives(); bundle.n_steps], bundle)
    }

    fn from_incentives(
        model: &MarketModel,
        prefs: &InvestorPrefs,
        incs: Vec<Incentives>,
        bundle: &PathBundle,
    ) -> Result<Self> {
        if bundle.n_sources != model.n_sources() {
            return Err(Error::Dimension(format!(
                "bundle has {} sources, model has {}",
                bundle.n_sources,
                model.n_sources()
            )));
        }
        let corr = model.correlation.clone();
        let steps = incs
            .into_par_iter()
            .enumerate()
            .map(|(k, inc)| {
                let t = bundle.times[k];
                let snap = eval_coefficients(model, t)?;
                let r = best_response(model, prefs, t, &inc).map_err(|e| Error::at_node(k, e))?;
                let p = r.p_hat;
                let mu_obs = snap.mu_obs(&p, model.mode);
                let sigma_obs = snap.sigma_obs(&p, model.mode);
                let a = &sigma_obs * &corr * sigma_obs.transpose();
                let charge = inc.g.to_dense() + &inc.z * inc.z.transpose() * prefs.gamma;
                Ok(PlanStep { t, snap, incentives: inc, p, h: r.h_value, mu_obs, sigma_obs, a, charge })
            })
            .collect::<Result<Vec<_>>>()?;
        let dt = (0..bundle.n_steps).map(|k| bundle.dt(k)).collect();
        Ok(ContractPlan { mode: model.mode, corr, steps, dt })
    }

    pub fn policy(&self) -> Policy {
        Policy { holdings: self.steps.iter().map(|s| s.p.clone()).collect() }
    }

    /// `∫ k(π̂) dt` on the grid.
    pub fn cost_integral_with(&self, prefs: &InvestorPrefs) -> f64 {
        self.steps.iter().zip(&self.dt).map(|(s, dt)| cost(prefs, &s.p) * dt).sum()
    }

    /// `∫ 𝓗 dt` on the grid, the exact log-value of the Principal for the
    /// piecewise-constant plan.
    pub fn script_h_integral(&self, prefs: &InvestorPrefs, gov: &GovPrefs) -> f64 {
        self.steps
            .iter()
            .zip(&self.dt)
            .map(|(s, dt)| script_h_snapshot(&s.snap, &self.corr, prefs, gov, &s.incentives, &s.p, self.mode) * dt)
            .sum()
    }

    /// Observable increments `ΔB^obs` on one step of one path.
    pub fn observable_increment(&self, bundle: &PathBundle, path: usize, step: usize) -> DVector<f64> {
        let s = &self.steps[step];
        let dt = self.dt[step];
        let dw = bundle.dw_at(path, step);
        let n_obs = s.mu_obs.len();
        let mut db = DVector::zeros(n_obs);
        db[0] = s.p.iter().zip(bundle.returns_at(path, step)).map(|(a, b)| a * b).sum();
        for r in 1..n_obs {
            let row = s.sigma_obs.row(r);
            db[r] = s.mu_obs[r] * dt + row.iter().zip(dw).map(|(a, b)| a * b).sum::<f64>();
        }
        db
    }

    /// Increment of the contract on one step.
    pub fn increment(&self, bundle: &PathBundle, path: usize, step: usize, qv: QvMode) -> f64 {
        let s = &self.steps[step];
        let dt = self.dt[step];
        let db = self.observable_increment(bundle, path, step);
        let quad = match qv {
            QvMode::Analytic => 0.5 * s.charge.component_mul(&s.a).sum() * dt,
            QvMode::Realized => 0.5 * db.dot(&(&s.charge * &db)),
        };
        s.incentives.z.dot(&db) + quad - s.h * dt
    }

    pub fn terminal(&self, bundle: &PathBundle, path: usize, y0: f64, qv: QvMode) -> f64 {
        (0..self.steps.len()).fold(y0, |y, k| y + self.increment(bundle, path, k, qv))
    }

    fn path(&self, bundle: &PathBundle, path: usize, y0: f64, qv: QvMode) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        let mut y = y0;
        out.push(y);
        for k in 0..self.steps.len() {
            y += self.increment(bundle, path, k, qv);
            out.push(y);
        }
        out
    }
}

/// Contract values `[path][node]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContractPath {
    pub times: Vec<f64>,
    pub n_paths: usize,
    pub y: Vec<f64>,
}

impl ContractPath {
    pub fn at(&self, path: usize, node: usize) -> f64 {
        self.y[path * self.times.len() + node]
    }

    pub fn terminal(&self) -> Vec<f64> {
        let n = self.times.len();
        (0..self.n_paths).map(|p| self.y[p * n + n - 1]).collect()
    }
}

/// Euler accumulation of `Y` along every path of the bundle.
pub fn accumulate_contract(plan: &ContractPlan, bundle: &PathBundle, y0: f64, qv: QvMode) -> Result<ContractPath> {
    if plan.steps.len() != bundle.n_steps {
        return Err(Error::GridMismatch(format!("plan has {} steps, bundle has {}", plan.steps.len(), bundle.n_steps)));
    }
    let y = (0..bundle.n_paths).into_par_iter().flat_map_iter(|p| plan.path(bundle, p, y0, qv)).collect();
    Ok(ContractPath { times: bundle.times.clone(), n_paths: bundle.n_paths, y })
}

/// A traded quantity whose increments the replication positions reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type", content = "source")]
pub enum Underlier {
    /// The investor's portfolio value.
    Portfolio,
    /// Log price of a risk source's instrument.
    LogPrice(usize),
    /// Driving Brownian motion of a risk source (contractible variables in
    /// risk-source mode).
    Brownian(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionKind {
    LogContract,
    VarianceSwap,
    CovarianceSwap,
    BondHolding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub kind: PositionKind,
    pub underliers: Vec<Underlier>,
    /// Instrument names matching `underliers`.
    pub names: Vec<String>,
    pub size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    /// `Γ̄ + γ Z̄ Z̄ᵀ`.
    pub c: Vec<Vec<f64>>,
    pub positions: Vec<Position>,
    pub coupon: f64,
    /// Holdings used to expand the portfolio's quadratic variation.
    pub holdings: Vec<f64>,
}

fn underlier_name(model: &MarketModel, u: Underlier) -> String {
    let source = |i: usize| -> String {
        let d_g = model.d_g();
        let d_c = model.d_c();
        if i < d_g {
            model.green[i].name.clone()
        } else if i < d_g + d_c {
            model.conventional[i - d_g].name.clone()
        } else {
            "index".into()
        }
    };
    match u {
        Underlier::Portfolio => "portfolio".into(),
        Underlier::LogPrice(i) => format!("log {}", source(i)),
        Underlier::Brownian(i) => format!("W {}", source(i)),
    }
}

/// Static positions replicating the averaged contract: log-contracts of
/// size `Z̄ᵢ`, the portfolio held in size `Z̄_X`, variance swaps of size
/// `½ 𝒞ᵢᵢ` and covariance swaps of size `𝒞ᵢⱼ`, with every bracket involving
/// the portfolio expanded on the holdings `π`.
pub fn replication_positions(
    model: &MarketModel,
    avg: &AveragedContract,
    holdings: &DVector<f64>,
    gamma: f64,
) -> ReplicationReport {
    let n_obs = avg.z_bar.len();
    let d_g = model.d_g();
    let n = model.n_sources();
    let c = avg.g_bar.to_dense() + &avg.z_bar * avg.z_bar.transpose() * gamma;
    let obs_underlier = |r: usize| -> Underlier {
        let source = if r <= d_g { r - 1 } else { n - 1 };
        match model.mode {
            IndexationMode::Price => Underlier::LogPrice(source),
            IndexationMode::RiskSource => Underlier::Brownian(source),
        }
    };

    // Keyed on (kind, ordered underlier pair) so repeated terms merge.
    let mut book: BTreeMap<(PositionKind, Vec<Underlier>), f64> = BTreeMap::new();
    let mut add = |kind: PositionKind, mut us: Vec<Underlier>, size: f64| {
        us.sort();
        let kind = match kind {
            PositionKind::CovarianceSwap if us[0] == us[1] => PositionKind::VarianceSwap,
            k => k,
        };
        *book.entry((kind, us)).or_insert(0.0) += size;
    };

    if avg.z_bar[0] != 0.0 {
        add(PositionKind::BondHolding, vec![Underlier::Portfolio], avg.z_bar[0]);
    }
    for r in 1..n_obs {
        if avg.z_bar[r] != 0.0 {
            add(PositionKind::LogContract, vec![obs_underlier(r)], avg.z_bar[r]);
        }
    }

    let active = |i: usize, j: usize| avg.z_bar[i] != 0.0 || avg.z_bar[j] != 0.0 || avg.g_bar.get(i, j) != 0.0;
    for i in 0..n_obs {
        for j in i..n_obs {
            if !active(i, j) {
                continue;
            }
            let cij = c[(i, j)];
            match (i, j) {
                (0, 0) => {
                    for a in 0..n {
                        for b in a..n {
                            let w = if a == b { 0.5 * cij * holdings[a] * holdings[a] } else { cij * holdings[a] * holdings[b] };
                            let kind = if a == b { PositionKind::VarianceSwap } else { PositionKind::CovarianceSwap };
                            add(kind, vec![Underlier::LogPrice(a), Underlier::LogPrice(b)], w);
                        }
                    }
                }
                (0, _) => {
                    let other = obs_underlier(j);
                    for a in 0..n {
                        let u = Underlier::LogPrice(a);
                        add(PositionKind::CovarianceSwap, vec![u, other], cij * holdings[a]);
                    }
                }
                _ if i == j => add(PositionKind::VarianceSwap, vec![obs_underlier(i), obs_underlier(i)], 0.5 * cij),
                _ => add(PositionKind::CovarianceSwap, vec![obs_underlier(i), obs_underlier(j)], cij),
            }
        }
    }

    let positions = book
        .into_iter()
        .map(|((kind, underliers), size)| {
            let underliers = if kind == PositionKind::VarianceSwap { vec![underliers[0]] } else { underliers };
            let names = underliers.iter().map(|&u| underlier_name(model, u)).collect();
            Position { kind, underliers, names, size }
        })
        .collect();
    ReplicationReport {
        c: (0..n_obs).map(|i| (0..n_obs).map(|j| c[(i, j)]).collect()).collect(),
        positions,
        coupon: -avg.coupon_integral,
        holdings: holdings.iter().copied().collect(),
    }
}

impl ReplicationReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Total payoff of the positions along one path, plus `y0` and the coupon.
    /// The portfolio is the one holding `holdings` throughout.
    pub fn payoff(&self, bundle: &PathBundle, path: usize, y0: f64) -> f64 {
        let holdings = DVector::from_vec(self.holdings.clone());
        let increment = |u: Underlier, k: usize| -> f64 {
            match u {
                Underlier::Portfolio => holdings.iter().zip(bundle.returns_at(path, k)).map(|(a, b)| a * b).sum(),
                Underlier::LogPrice(i) => bundle.log_price_increment(path, k, i),
                Underlier::Brownian(i) => bundle.dw_at(path, k)[i],
            }
        };
        let mut total = y0 + self.coupon;
        for pos in &self.positions {
            let value: f64 = match pos.kind {
                PositionKind::LogContract | PositionKind::BondHolding => {
                    (0..bundle.n_steps).map(|k| increment(pos.underliers[0], k)).sum()
                }
                PositionKind::VarianceSwap => (0..bundle.n_steps).map(|k| increment(pos.underliers[0], k).powi(2)).sum(),
                PositionKind::CovarianceSwap => (0..bundle.n_steps)
                    .map(|k| increment(pos.underliers[0], k) * increment(pos.underliers[1], k))
                    .sum(),
            };
            total += pos.size * value;
        }
        total
    }
}

/// `½ Tr[(Γ̄ + γ Z̄ Z̄ᵀ) Q]` for a bracket matrix `Q`.
pub fn quadratic_charge(g: &SymMatrix, z: &DVector<f64>, gamma: f64, q: &DMatrix<f64>) -> f64 {
    let c = g.to_dense() + z * z.transpose() * gamma;
    0.5 * c.component_mul(q).sum()
}
