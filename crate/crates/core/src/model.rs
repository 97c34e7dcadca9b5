//! Market model, preferences, coefficient evaluation and the builders for the
//! drift and volatility of the contractible variables.
//!
//! Risk sources are ordered green bonds first, then conventional bonds, then
//! the conventional-bond index. Contractible variables are ordered portfolio
//! value `X`, then one coordinate per green bond, then the index.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::min_eigenvalue;

/// `x(t) = a + b (T_instrument - t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineCoeff {
    pub a: f64,
    pub b: f64,
}

impl AffineCoeff {
    pub const ZERO: AffineCoeff = AffineCoeff { a: 0.0, b: 0.0 };

    pub fn new(a: f64, b: f64) -> Self {
        AffineCoeff { a, b }
    }

    pub fn constant(a: f64) -> Self {
        AffineCoeff { a, b: 0.0 }
    }

    pub fn eval(&self, maturity: f64, t: f64) -> f64 {
        self.a + self.b * (maturity - t)
    }

    fn scaled(&self, c: f64) -> Self {
        AffineCoeff { a: self.a * c, b: self.b * c }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BondSpec {
    pub name: String,
    pub maturity: f64,
    pub rate: AffineCoeff,
    pub premium: AffineCoeff,
    pub vol: AffineCoeff,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexSpec {
    pub maturity: f64,
    pub drift: AffineCoeff,
    pub vol: AffineCoeff,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndexationMode {
    /// Contract indexed on the portfolio and the green/index Brownian drivers.
    #[default]
    RiskSource,
    /// Contract indexed on the portfolio and the green/index log-prices.
    Price,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    pub epsilon: f64,
    pub upper: f64,
}

impl Default for ControlBox {
    fn default() -> Self {
        ControlBox { epsilon: 0.01, upper: 10.0 }
    }
}

impl ControlBox {
    pub fn clamp(&self, x: f64) -> f64 {
        x.max(self.epsilon).min(self.upper)
    }

    pub fn clamp_vec(&self, p: &DVector<f64>) -> DVector<f64> {
        p.map(|x| self.clamp(x))
    }

    pub fn check(&self, p: &DVector<f64>) -> Result<()> {
        for (i, &v) in p.iter().enumerate() {
            if !(v >= self.epsilon && v <= self.upper) {
                return Err(Error::OutOfBox { index: i, value: v, lo: self.epsilon, hi: self.upper });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarketModel {
    pub horizon: f64,
    pub green: Vec<BondSpec>,
    pub conventional: Vec<BondSpec>,
    pub index: IndexSpec,
    /// Correlation of the risk sources (green, conventional, index).
    pub correlation: DMatrix<f64>,
    pub control_box: ControlBox,
    /// Multiplies the rate, volatility and index drift/volatility coefficients
    /// (premiums are dimensionless and left alone). 0.01 reads a coefficient
    /// table quoted in percent.
    pub coefficient_scale: f64,
    pub mode: IndexationMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvestorPrefs {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GovPrefs {
    /// Green targets `G`, one per green bond.
    pub targets: DVector<f64>,
    pub kappa: f64,
    pub nu: f64,
    /// Weight the target penalty by `kappa` in the pointwise criterion (and in
    /// the Principal's terminal objective). When false the weight is 1.
    pub kappa_in_h: bool,
}

impl GovPrefs {
    pub fn target_weight(&self) -> f64 {
        if self.kappa_in_h {
            self.kappa
        } else {
            1.0
        }
    }

    /// `w Σᵢ (Gᵢ − pᵢ)²` over the green coordinates of `p`.
    pub fn target_penalty(&self, p: &DVector<f64>) -> f64 {
        let w = self.target_weight();
        w * self.targets.iter().enumerate().map(|(i, g)| (g - p[i]).powi(2)).sum::<f64>()
    }
}

/// Every time-dependent coefficient at a fixed `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientSnapshot {
    pub t: f64,
    pub r_g: Vec<f64>,
    pub eta_g: Vec<f64>,
    pub sigma_g: Vec<f64>,
    pub r_c: Vec<f64>,
    pub eta_c: Vec<f64>,
    pub sigma_c: Vec<f64>,
    pub mu_i: f64,
    pub sigma_i: f64,
}

impl CoefficientSnapshot {
    pub fn d_g(&self) -> usize {
        self.r_g.len()
    }

    pub fn d_c(&self) -> usize {
        self.r_c.len()
    }

    pub fn n_sources(&self) -> usize {
        self.d_g() + self.d_c() + 1
    }

    /// Return drift per risk source: `r + η σ` for bonds, `μ^I` for the index.
    pub fn drift(&self) -> DVector<f64> {
        let mut m = Vec::with_capacity(self.n_sources());
        m.extend((0..self.d_g()).map(|i| self.r_g[i] + self.eta_g[i] * self.sigma_g[i]));
        m.extend((0..self.d_c()).map(|i| self.r_c[i] + self.eta_c[i] * self.sigma_c[i]));
        m.push(self.mu_i);
        DVector::from_vec(m)
    }

    /// Return volatility per risk source.
    pub fn vol(&self) -> DVector<f64> {
        let mut s = Vec::with_capacity(self.n_sources());
        s.extend_from_slice(&self.sigma_g);
        s.extend_from_slice(&self.sigma_c);
        s.push(self.sigma_i);
        DVector::from_vec(s)
    }

    pub fn mu_obs(&self, p: &DVector<f64>, mode: IndexationMode) -> DVector<f64> {
        let d_g = self.d_g();
        let mut mu = DVector::zeros(d_g + 2);
        mu[0] = p.dot(&self.drift());
        if mode == IndexationMode::Price {
            for i in 0..d_g {
                let s = self.sigma_g[i];
                mu[1 + i] = self.r_g[i] + self.eta_g[i] * s - 0.5 * s * s;
            }
            mu[d_g + 1] = self.mu_i - 0.5 * self.sigma_i * self.sigma_i;
        }
        mu
    }

    pub fn sigma_obs(&self, p: &DVector<f64>, mode: IndexationMode) -> DMatrix<f64> {
        let d_g = self.d_g();
        let n = self.n_sources();
        let s = self.vol();
        let mut m = DMatrix::zeros(d_g + 2, n);
        for j in 0..n {
            m[(0, j)] = p[j] * s[j];
        }
        let (green_scale, index_scale) = match mode {
            IndexationMode::RiskSource => (vec![1.0; d_g], 1.0),
            IndexationMode::Price => (self.sigma_g.clone(), self.sigma_i),
        };
        for i in 0..d_g {
            m[(1 + i, i)] = green_scale[i];
        }
        m[(d_g + 1, n - 1)] = index_scale;
        m
    }
}

impl MarketModel {
    pub fn d_g(&self) -> usize {
        self.green.len()
    }

    pub fn d_c(&self) -> usize {
        self.conventional.len()
    }

    pub fn n_sources(&self) -> usize {
        self.d_g() + self.d_c() + 1
    }

    /// Number of contractible variables.
    pub fn n_obs(&self) -> usize {
        self.d_g() + 2
    }

    /// Coefficients at `t` without the positivity check.
    pub fn coefficients_at(&self, t: f64) -> CoefficientSnapshot {
        let c = self.coefficient_scale;
        let bond = |b: &BondSpec| {
            (
                b.rate.scaled(c).eval(b.maturity, t),
                b.premium.eval(b.maturity, t),
                b.vol.scaled(c).eval(b.maturity, t),
            )
        };
        let (r_g, eta_g, sigma_g) = unzip3(self.green.iter().map(bond));
        let (r_c, eta_c, sigma_c) = unzip3(self.conventional.iter().map(bond));
        CoefficientSnapshot {
            t,
            r_g,
            eta_g,
            sigma_g,
            r_c,
            eta_c,
            sigma_c,
            mu_i: self.index.drift.scaled(c).eval(self.index.maturity, t),
            sigma_i: self.index.vol.scaled(c).eval(self.index.maturity, t),
        }
    }

    fn source_name(&self, k: usize) -> String {
        let d_g = self.d_g();
        if k < d_g {
            self.green[k].name.clone()
        } else if k < d_g + self.d_c() {
            self.conventional[k - d_g].name.clone()
        } else {
            "index".to_string()
        }
    }

    /// Replaces the Brownian driver of source `k` by its negative.
    ///
    /// Volatility and premium coefficients change sign together with row and
    /// column `k` of the correlation matrix, so the joint law of returns is
    /// unchanged. Used to bring a coefficient set with a negative volatility
    /// into the positive-volatility convention.
    pub fn reflect_source(&mut self, k: usize) {
        let d_g = self.d_g();
        let n = self.n_sources();
        assert!(k < n, "source index out of range");
        if k < n - 1 {
            let b = if k < d_g { &mut self.green[k] } else { &mut self.conventional[k - d_g] };
            b.vol = AffineCoeff::new(-b.vol.a, -b.vol.b);
            b.premium = AffineCoeff::new(-b.premium.a, -b.premium.b);
        } else {
            self.index.vol = AffineCoeff::new(-self.index.vol.a, -self.index.vol.b);
        }
        for j in 0..n {
            if j != k {
                self.correlation[(k, j)] = -self.correlation[(k, j)];
                self.correlation[(j, k)] = -self.correlation[(j, k)];
            }
        }
    }

    /// Uniform grid of `n` points over `[0, T]`.
    pub fn time_grid(&self, n: usize) -> Vec<f64> {
        (0..n).map(|i| self.horizon * i as f64 / (n - 1) as f64).collect()
    }
}

fn unzip3(it: impl Iterator<Item = (f64, f64, f64)>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut c = Vec::new();
    for (x, y, z) in it {
        a.push(x);
        b.push(y);
        c.push(z);
    }
    (a, b, c)
}

pub fn eval_coefficients(model: &MarketModel, t: f64) -> Result<CoefficientSnapshot> {
    if !(0.0..=model.horizon).contains(&t) {
        return Err(Error::TimeOutOfRange { t, horizon: model.horizon });
    }
    let snap = model.coefficients_at(t);
    let vols = snap.vol();
    for (k, &v) in vols.iter().enumerate() {
        if !(v > 0.0) {
            return Err(Error::NonPositiveVolatility { instrument: model.source_name(k), t, value: v });
        }
    }
    Ok(snap)
}

/// `k(p) = ½ Σ βᵢ (pᵢ − αᵢ)²`.
pub fn cost(prefs: &InvestorPrefs, p: &DVector<f64>) -> f64 {
    0.5 * prefs.beta.iter().zip(p.iter().zip(prefs.alpha.iter())).map(|(b, (x, a))| b * (x - a) * (x - a)).sum::<f64>()
}

pub fn mu_obs(model: &MarketModel, t: f64, p: &DVector<f64>) -> Result<DVector<f64>> {
    check_holdings(model, p)?;
    Ok(eval_coefficients(model, t)?.mu_obs(p, model.mode))
}

pub fn sigma_obs(model: &MarketModel, t: f64, p: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_holdings(model, p)?;
    Ok(eval_coefficients(model, t)?.sigma_obs(p, model.mode))
}

fn check_holdings(model: &MarketModel, p: &DVector<f64>) -> Result<()> {
    if p.len() != model.n_sources() {
        return Err(Error::Dimension(format!("holdings have length {}, expected {}", p.len(), model.n_sources())));
    }
    model.control_box.check(p)
}

pub fn validate(model: &MarketModel) -> Result<()> {
    let n = model.n_sources();
    let b = model.control_box;
    if !(b.epsilon > 0.0 && b.upper > b.epsilon && b.upper.is_finite()) {
        return Err(Error::BadBox { epsilon: b.epsilon, upper: b.upper });
    }
    if !(model.horizon > 0.0 && model.horizon.is_finite()) {
        return Err(Error::InvalidParameter(format!("horizon must be positive, got {}", model.horizon)));
    }
    if !(model.coefficient_scale > 0.0 && model.coefficient_scale.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "coefficient_scale must be positive, got {}",
            model.coefficient_scale
        )));
    }
    if model.d_g() == 0 {
        return Err(Error::InvalidParameter("at least one green bond is required".into()));
    }
    let c = &model.correlation;
    if c.nrows() != n || c.ncols() != n {
        return Err(Error::Dimension(format!("correlation is {}x{}, expected {n}x{n}", c.nrows(), c.ncols())));
    }
    for i in 0..n {
        if (c[(i, i)] - 1.0).abs() > 1e-12 {
            return Err(Error::BadCorrelation(format!("diagonal entry {i} is {}", c[(i, i)])));
        }
        for j in 0..n {
            let v = c[(i, j)];
            if !v.is_finite() || v.abs() > 1.0 {
                return Err(Error::BadCorrelation(format!("entry ({i},{j}) = {v} outside [-1, 1]")));
            }
            if (v - c[(j, i)]).abs() > 1e-12 {
                return Err(Error::BadCorrelation(format!("not symmetric at ({i},{j})")));
            }
        }
    }
    let lmin = min_eigenvalue(c);
    if lmin < -1e-10 {
        return Err(Error::NotPsd { min_eigenvalue: lmin });
    }
    for t in model.time_grid(100) {
        eval_coefficients(model, t)?;
    }
    Ok(())
}

impl InvestorPrefs {
    pub fn validate(&self, n_sources: usize) -> Result<()> {
        if self.alpha.len() != n_sources || self.beta.len() != n_sources {
            return Err(Error::Dimension(format!(
                "investor alpha/beta must have length {n_sources}, got {}/{}",
                self.alpha.len(),
                self.beta.len()
            )));
        }
        if self.beta.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
            return Err(Error::InvalidParameter("beta entries must be finite and nonnegative".into()));
        }
        if self.alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidParameter("alpha entries must be finite".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

impl GovPrefs {
    pub fn validate(&self, d_g: usize) -> Result<()> {
        if self.targets.len() != d_g {
            return Err(Error::Dimension(format!("{} green targets for {d_g} green bonds", self.targets.len())));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidParameter(format!("kappa must be nonnegative, got {}", self.kappa)));
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::InvalidParameter(format!("nu must be positive, got {}", self.nu)));
        }
        Ok(())
    }
}

/// Calibrated coefficient sets for one green bond, two conventional bonds and
/// their index over a one-year horizon.
pub mod presets {
    use super::*;

    /// The calibrated table as published: the long conventional bond carries
    /// a negative volatility over the whole horizon.
    pub fn published_market() -> MarketModel {
        MarketModel {
            horizon: 1.0,
            green: vec![BondSpec {
                name: "FRTR 1.75 2039 (green)".into(),
                maturity: 19.73,
                rate: AffineCoeff::new(-0.07, 0.66),
                premium: AffineCoeff::new(0.38, 0.13),
                vol: AffineCoeff::new(0.41, 0.31),
            }],
            conventional: vec![
                BondSpec {
                    name: "FRTR 6 2025".into(),
                    maturity: 6.06,
                    rate: AffineCoeff::new(-0.05, -0.91),
                    premium: AffineCoeff::new(0.01, 0.30),
                    vol: AffineCoeff::new(0.11, 0.26),
                },
                BondSpec {
                    name: "FRTR 4 2060".into(),
                    maturity: 40.58,
                    rate: AffineCoeff::new(0.28, 0.02),
                    premium: AffineCoeff::new(0.12, -0.99),
                    vol: AffineCoeff::new(0.10, -0.96),
                },
            ],
            index: IndexSpec {
                maturity: 18.29,
                drift: AffineCoeff::new(-0.01, 0.53),
                vol: AffineCoeff::new(0.01, 0.92),
            },
            correlation: DMatrix::from_row_slice(
                4,
                4,
                &[1.0, 0.2, 0.8, 0.8, 0.2, 1.0, 0.2, 0.7, 0.8, 0.2, 1.0, 0.7, 0.8, 0.7, 0.7, 1.0],
            ),
            control_box: ControlBox::default(),
            coefficient_scale: 1.0,
            mode: IndexationMode::RiskSource,
        }
    }

    /// Published table read in percent units, with the long conventional
    /// bond's driver reflected so every volatility is positive.
    pub fn reference_market() -> MarketModel {
        let mut m = published_market();
        m.reflect_source(2);
        m.coefficient_scale = 0.01;
        m
    }

    pub fn reference_investor() -> InvestorPrefs {
        InvestorPrefs {
            alpha: DVector::from_vec(vec![0.2, 0.2, 0.3, 0.5]),
            beta: DVector::from_vec(vec![0.4, 0.4, 0.4, 0.4]),
            gamma: 1.0,
        }
    }

    pub fn reference_government() -> GovPrefs {
        GovPrefs { targets: DVector::from_vec(vec![0.0]), kappa: 0.0, nu: 1.0, kappa_in_h: true }
    }

    /// Government targeting three units of green holdings.
    pub fn green_target_government() -> GovPrefs {
        GovPrefs { targets: DVector::from_vec(vec![3.0]), kappa: 0.8, nu: 1.0, kappa_in_h: true }
    }
}
