//! Principal's problem with a stochastic green short rate (one green bond).
//!
//! The state is `b = (X, W^g, r, W^I)`. Writing the Principal's value as
//! `U(t, b) exp(−ν q)` with `q` the running surplus, `U` solves
//! `∂ₜU + sup H = 0`, `U(T) = −1`, where for fixed incentives
//!
//! ```text
//! H = −ν U 𝓗ˢ + U_b·μˢ + ½ Tr[A U_bb] − ν U_bᵀ A (e₁ − z),
//! 𝓗ˢ = e₁·μˢ − pen − k − ½γ zᵀAz − ½ν (e₁ − z)ᵀA(e₁ − z),
//! ```
//!
//! `μˢ`, `A` being the drift and covariation of `b` under the agent's
//! response. Only `(z_X, g_XX, g_Xg, g_XI)` move the response; the other
//! components of `z` maximize a concave quadratic in closed form and the
//! remaining entries of `g` cancel.

mod io;
mod solver;

use nalgebra::{DMatrix, DVector};

use crate::agent::{maximize_quadratic, Incentives, ObsQuadratic};
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::model::{cost, eval_coefficients, CoefficientSnapshot, GovPrefs, IndexationMode, InvestorPrefs, MarketModel};

pub use crate::mc::{RateDrift, RateModel};
pub use io::{extract_policy, read_solution, write_slice_csv, write_solution, FeedbackPaths};
pub use solver::{solve_hjb, stencil, HjbLayer, HjbSettings, HjbSolution, NodeControl};

/// Number of state variables.
pub const DIM: usize = 4;
/// State indices.
pub const X: usize = 0;
pub const WG: usize = 1;
pub const R: usize = 2;
pub const WI: usize = 3;

/// Uniform axis with `n` nodes on `[lo, hi]`; a single node is a frozen
/// coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        Axis { lo, hi, n }
    }

    pub fn frozen(x: f64) -> Self {
        Axis { lo: x, hi: x, n: 1 }
    }

    pub fn h(&self) -> f64 {
        if self.n > 1 {
            (self.hi - self.lo) / (self.n - 1) as f64
        } else {
            0.0
        }
    }

    pub fn x(&self, i: usize) -> f64 {
        self.lo + self.h() * i as f64
    }

    /// Cell index and weight of the right node for linear interpolation,
    /// plus whether `x` had to be clamped into the axis.
    pub fn locate(&self, x: f64) -> (usize, f64, bool) {
        if self.n == 1 {
            return (0, 0.0, false);
        }
        let clamped = x < self.lo || x > self.hi;
        let s = ((x.clamp(self.lo, self.hi) - self.lo) / self.h()).min((self.n - 1) as f64);
        let i = (s.floor() as usize).min(self.n - 2);
        (i, s - i as f64, clamped)
    }
}

/// Node counts given as steps per axis.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridSteps {
    pub time: usize,
    pub x: usize,
    pub w_g: usize,
    pub r: usize,
    pub w_i: usize,
}

impl GridSteps {
    /// 10 time steps, 40 for the portfolio, 20 for each risk factor and 10
    /// for the rate.
    pub const FOOTNOTE: GridSteps = GridSteps { time: 10, x: 40, w_g: 20, r: 10, w_i: 20 };

    /// Every step count multiplied by `k` (a frozen rate axis stays frozen).
    pub fn refined(&self, k: usize) -> GridSteps {
        GridSteps { time: self.time * k, x: self.x * k, w_g: self.w_g * k, r: self.r * k, w_i: self.w_i * k }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HjbGrid {
    pub axes: [Axis; DIM],
    pub n_t: usize,
    pub horizon: f64,
}

impl HjbGrid {
    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0 {
            return Err(Error::InvalidParameter("HJB grid needs at least one time step".into()));
        }
        for (k, a) in self.axes.iter().enumerate() {
            if !(a.lo.is_finite() && a.hi.is_finite()) {
                return Err(Error::InvalidParameter(format!("axis {k} has non-finite bounds")));
            }
            let frozen_ok = a.n == 1;
            if !frozen_ok && (a.n < 3 || !(a.hi > a.lo)) {
                return Err(Error::InvalidParameter(format!(
                    "axis {k} needs at least 3 nodes on a non-empty interval (or a single frozen node)"
                )));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; DIM] {
        [self.axes[0].n, self.axes[1].n, self.axes[2].n, self.axes[3].n]
    }

    pub fn n_nodes(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn strides(&self) -> [usize; DIM] {
        let s = self.shape();
        [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1]
    }

    pub fn index(&self, i: [usize; DIM]) -> usize {
        let st = self.strides();
        i[0] * st[0] + i[1] * st[1] + i[2] * st[2] + i[3] * st[3]
    }

    pub fn unindex(&self, mut k: usize) -> [usize; DIM] {
        let st = self.strides();
        let mut out = [0; DIM];
        for d in 0..DIM {
            out[d] = k / st[d];
            k %= st[d];
        }
        out
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_t as f64
    }

    pub fn time(&self, layer: usize) -> f64 {
        self.horizon * layer as f64 / self.n_t as f64
    }

    /// Bounds from the deterministic problem: the portfolio axis spans the
    /// mean ± 5 standard deviations of `X_t` under the deterministic policy
    /// over the whole horizon, Brownian axes ±3√T, and the rate axis the stationary OU range
    /// ± 5σ/√(2θ) (the green rate curve ± 5σ√T when there is no mean
    /// reversion). `steps.r == 0` freezes the rate on the deterministic curve.
    pub fn from_steps(
        model: &MarketModel,
        deterministic_policy: &[(f64, DVector<f64>)],
        rate: &RateModel,
        steps: GridSteps,
    ) -> Result<HjbGrid> {
        let t_end = model.horizon;
        let (mut mean, mut var) = (0.0, 0.0);
        let (mut x_lo, mut x_hi) = (0.0f64, 0.0f64);
        for w in deterministic_policy.windows(2) {
            let (t, p) = (w[0].0, &w[0].1);
            let dt = w[1].0 - t;
            let snap = eval_coefficients(model, t)?;
            let v = p.component_mul(&snap.vol());
            let (drift, diffusion) = (p.dot(&snap.drift()), v.dot(&(&model.correlation * &v)));
            // The ±5 sd envelope is concave in t, so it is tracked between nodes too.
            for k in 1..=64 {
                let s = dt * k as f64 / 64.0;
                let (m, sd) = (mean + drift * s, (var + diffusion * s).sqrt());
                x_lo = x_lo.min(m - 5.0 * sd);
                x_hi = x_hi.max(m + 5.0 * sd);
            }
            mean += drift * dt;
            var += diffusion * dt;
        }
        if !(x_hi > x_lo) {
            x_lo -= 1.0;
            x_hi += 1.0;
        }
        let w_half = 3.0 * t_end.sqrt();
        let r_axis = if steps.r == 0 {
            Axis::frozen(model.coefficients_at(0.0).r_g[0])
        } else {
            let (lo, hi) = rate_bounds(model, rate);
            Axis::new(lo, hi, steps.r + 1)
        };
        let grid = HjbGrid {
            axes: [
                Axis::new(x_lo, x_hi, steps.x + 1),
                Axis::new(-w_half, w_half, steps.w_g + 1),
                r_axis,
                Axis::new(-w_half, w_half, steps.w_i + 1),
            ],
            n_t: steps.time,
            horizon: t_end,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Whether the rate sits on the deterministic green curve.
    pub fn rate_frozen(&self) -> bool {
        self.axes[R].n == 1
    }
}

fn rate_bounds(model: &MarketModel, rate: &RateModel) -> (f64, f64) {
    let curve: Vec<f64> = (0..=20).map(|k| model.coefficients_at(model.horizon * k as f64 / 20.0).r_g[0]).collect();
    let cmin = curve.iter().copied().fold(f64::INFINITY, f64::min);
    let cmax = curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let theta = match rate.drift {
        RateDrift::Ou { theta, .. } | RateDrift::CurveReverting { theta } => theta,
    };
    let spread = if theta > 0.0 { 5.0 * rate.sigma_r / (2.0 * theta).sqrt() } else { 5.0 * rate.sigma_r * model.horizon.sqrt() };
    let pad = spread.max(1e-3 * (1.0 + cmax.abs()));
    match rate.drift {
        RateDrift::Ou { m, theta } if theta > 0.0 && rate.sigma_r > 0.0 => {
            (m.min(cmin) - pad, m.max(cmax) + pad)
        }
        _ => (cmin - pad, cmax + pad),
    }
}

/// Fixed ingredients of the pointwise problem at one time and rate.
#[derive(Clone, Debug)]
pub struct LocalProblem<'a> {
    pub model: &'a MarketModel,
    pub prefs: &'a InvestorPrefs,
    pub gov: &'a GovPrefs,
    /// Coefficients with the live green rate substituted.
    pub snap: CoefficientSnapshot,
    pub rate_drift: f64,
    pub sigma_r: f64,
}

impl<'a> LocalProblem<'a> {
    pub fn new(
        model: &'a MarketModel,
        prefs: &'a InvestorPrefs,
        gov: &'a GovPrefs,
        rate: &RateModel,
        t: f64,
        r: f64,
    ) -> Result<Self> {
        check_model(model)?;
        let mut snap = eval_coefficients(model, t)?;
        snap.r_g[0] = r;
        Ok(LocalProblem { model, prefs, gov, snap, rate_drift: rate.drift_at(model, t, r), sigma_r: rate.sigma_r })
    }

    /// Deterministic-shaped incentives on (X, W^g, W^I) carried by the
    /// four-state incentives.
    fn reduced(z: &DVector<f64>, g: &SymMatrix) -> Incentives {
        let keep = [X, WG, WI];
        let mut g3 = SymMatrix::zeros(3);
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate().skip(a) {
                g3.set(a, b, g.get(i, j));
            }
        }
        Incentives { z: DVector::from_fn(3, |a, _| z[keep[a]]), g: g3 }
    }

    /// Inner best response and the value of `h^{obs,S}` there.
    pub fn best_response(&self, z: &DVector<f64>, g: &SymMatrix) -> (DVector<f64>, f64) {
        let inc = Self::reduced(z, g);
        let quad = ObsQuadratic::new(&self.snap, &self.model.correlation, self.prefs, &inc, IndexationMode::RiskSource);
        let r = maximize_quadratic(&quad, self.prefs, &self.model.control_box);
        let extra = z[R] * self.rate_drift + 0.5 * g.get(R, R) * self.sigma_r * self.sigma_r;
        (r.p_hat, r.h_value + extra)
    }

    /// Drift of the state under holdings `p`.
    pub fn mu(&self, p: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![p.dot(&self.snap.drift()), 0.0, self.rate_drift, 0.0])
    }

    /// Volatility of the state on the sources `(bond and index Brownians,
    /// rate Brownian)`.
    pub fn sigma(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let n = self.snap.n_sources();
        let s3 = self.snap.sigma_obs(p, IndexationMode::RiskSource);
        let mut m = DMatrix::zeros(DIM, n + 1);
        for j in 0..n {
            m[(X, j)] = s3[(0, j)];
            m[(WG, j)] = s3[(1, j)];
            m[(WI, j)] = s3[(2, j)];
        }
        m[(R, n)] = self.sigma_r;
        m
    }

    /// Correlation of `(bond and index Brownians, rate Brownian)`; the rate
    /// Brownian is independent of the others.
    pub fn full_correlation(&self) -> DMatrix<f64> {
        let n = self.snap.n_sources();
        let mut c = DMatrix::identity(n + 1, n + 1);
        c.view_mut((0, 0), (n, n)).copy_from(&self.model.correlation);
        c
    }

    pub fn covariation(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let s = self.sigma(p);
        &s * self.full_correlation() * s.transpose()
    }

    /// `𝓗ˢ` at incentives `(z, g)` and holdings `p`, evaluated term by term.
    pub fn script_h(&self, z: &DVector<f64>, g: &SymMatrix, p: &DVector<f64>) -> f64 {
        let mu = self.mu(p);
        let a = self.covariation(p);
        let h = -cost(self.prefs, p) + z.dot(&mu) + 0.5 * g.trace_product(&a);
        let charge = g.to_dense() + z * z.transpose() * self.prefs.gamma;
        let mut e = -z;
        e[X] += 1.0;
        e.dot(&mu) - self.gov.target_penalty(p) - 0.5 * charge.component_mul(&a).sum() + h
            - 0.5 * self.gov.nu * e.dot(&(&a * &e))
    }

    /// Hamiltonian at fixed incentives, with the inner best response.
    pub fn hamiltonian(&self, z: &DVector<f64>, g: &SymMatrix, d: &Derivatives) -> f64 {
        let (p, _) = self.best_response(z, g);
        self.hamiltonian_at(z, g, &p, d)
    }

    pub fn hamiltonian_at(&self, z: &DVector<f64>, g: &SymMatrix, p: &DVector<f64>, d: &Derivatives) -> f64 {
        let nu = self.gov.nu;
        let mu = self.mu(p);
        let a = self.covariation(p);
        let mut e = -z;
        e[X] += 1.0;
        -nu * d.u * self.script_h(z, g, p) + d.u_b.dot(&mu) + 0.5 * d.u_bb.component_mul(&a).sum()
            - nu * d.u_b.dot(&(&a * &e))
    }

    /// Optimal `(z_g, z_r, z_I)` for given `z_X` and holdings.
    pub fn closed_form_rest(&self, z_x: f64, a: &DMatrix<f64>, d: &Derivatives) -> DVector<f64> {
        let nu = self.gov.nu;
        let gamma = self.prefs.gamma;
        let w = -nu * d.u;
        let rest = [WG, R, WI];
        let a_rr = DMatrix::from_fn(3, 3, |i, j| a[(rest[i], rest[j])]);
        let au = a * &d.u_b;
        let rhs = DVector::from_fn(3, |i, _| {
            let k = rest[i];
            (w * nu * a[(k, X)] + nu * au[k]) / (w * (gamma + nu)) - a[(k, X)] * z_x
        });
        let pinv = a_rr.pseudo_inverse(1e-12).expect("pseudo-inverse of a symmetric matrix");
        pinv * rhs
    }

    /// Assembles full incentives from the response-moving parameters
    /// `(z_X, g_XX, g_Xg, g_XI)`.
    pub fn incentives_from(&self, theta: &[f64; 4], d: &Derivatives) -> (DVector<f64>, SymMatrix, DVector<f64>) {
        let mut z = DVector::zeros(DIM);
        z[X] = theta[0];
        let mut g = SymMatrix::zeros(DIM);
        g.set(X, X, theta[1]);
        g.set(X, WG, theta[2]);
        g.set(X, WI, theta[3]);
        let (p, _) = self.best_response(&z, &g);
        let a = self.covariation(&p);
        let rest = self.closed_form_rest(theta[0], &a, d);
        z[WG] = rest[0];
        z[R] = rest[1];
        z[WI] = rest[2];
        (z, g, p)
    }
}

fn check_model(model: &MarketModel) -> Result<()> {
    if model.d_g() != 1 {
        return Err(Error::Config(format!(
            "the stochastic-rate solver handles exactly one green bond, got {}",
            model.d_g()
        )));
    }
    if model.mode != IndexationMode::RiskSource {
        return Err(Error::Config("the stochastic-rate solver contracts on risk sources".into()));
    }
    Ok(())
}

/// Value and spatial derivatives of `U` at a node.
#[derive(Clone, Debug, PartialEq)]
pub struct Derivatives {
    pub u: f64,
    pub u_b: DVector<f64>,
    pub u_bb: DMatrix<f64>,
}

impl Derivatives {
    pub fn flat(u: f64) -> Self {
        Derivatives { u, u_b: DVector::zeros(DIM), u_bb: DMatrix::zeros(DIM, DIM) }
    }
}

/// Agent's response to four-state incentives with a live green rate.
pub fn inner_best_response_s(
    model: &MarketModel,
    prefs: &InvestorPrefs,
    rate: &RateModel,
    t: f64,
    z: &DVector<f64>,
    g: &SymMatrix,
    r: f64,
) -> Result<DVector<f64>> {
    if z.len() != DIM || g.dim() != DIM {
        return Err(Error::Dimension(format!("stochastic-rate incentives have dimension {DIM}")));
    }
    let gov = GovPrefs { targets: DVector::zeros(1), kappa: 0.0, nu: 1.0, kappa_in_h: false };
    let lp = LocalProblem::new(model, prefs, &gov, rate, t, r)?;
    Ok(lp.best_response(z, g).0)
}

/// Hamiltonian with the inner best response substituted.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian_s(
    model: &MarketModel,
    prefs: &InvestorPrefs,
    gov: &GovPrefs,
    rate: &RateModel,
    t: f64,
    z: &DVector<f64>,
    g: &SymMatrix,
    r: f64,
    d: &Derivatives,
) -> Result<f64> {
    if z.len() != DIM || g.dim() != DIM || d.u_b.len() != DIM {
        return Err(Error::Dimension(format!("stochastic-rate incentives have dimension {DIM}")));
    }
    let lp = LocalProblem::new(model, prefs, gov, rate, t, r)?;
    Ok(lp.hamiltonian(z, g, d))
}
