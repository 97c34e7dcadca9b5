//! Investor side: the Hamiltonian on contractible variables, its maximizer
//! (the best response to a pair of incentives) and the response to a flat
//! green tax rebate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{is_positive_definite, SymMatrix};
use crate::model::{cost, eval_coefficients, CoefficientSnapshot, ControlBox, IndexationMode, InvestorPrefs, MarketModel};
use crate::optim::{minimize_box, BoxOptions};

/// Linear (`z`) and quadratic-variation (`g`) incentives on the contractible
/// variables.
#[derive(Clone, Debug, PartialEq)]
pub struct Incentives {
    pub z: DVector<f64>,
    pub g: SymMatrix,
}

impl Incentives {
    pub fn zeros(n_obs: usize) -> Self {
        Incentives { z: DVector::zeros(n_obs), g: SymMatrix::zeros(n_obs) }
    }

    /// `z = e₁`, `g = 0`: the whole portfolio is passed to the investor.
    pub fn pass_through(n_obs: usize) -> Self {
        let mut inc = Self::zeros(n_obs);
        inc.z[0] = 1.0;
        inc
    }

    pub fn n_obs(&self) -> usize {
        self.z.len()
    }

    pub fn n_params(n_obs: usize) -> usize {
        n_obs + n_obs * (n_obs + 1) / 2
    }

    /// `z` followed by the upper triangle of `g`.
    pub fn to_params(&self) -> DVector<f64> {
        let mut v: Vec<f64> = self.z.iter().copied().collect();
        v.extend_from_slice(self.g.upper());
        DVector::from_vec(v)
    }

    pub fn from_params(n_obs: usize, theta: &DVector<f64>) -> Self {
        let z = DVector::from_fn(n_obs, |i, _| theta[i]);
        let g = SymMatrix::from_upper(n_obs, theta.iter().skip(n_obs).copied().collect()).expect("parameter length");
        Incentives { z, g }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResponseDiagnostics {
    /// The local searches from every start reached the same value within 1e-4.
    pub starts_agree: bool,
    /// The objective is strictly concave in the holdings.
    pub concave: bool,
    pub used_grid_refine: bool,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestResponse {
    pub p_hat: DVector<f64>,
    pub h_value: f64,
    pub diagnostics: ResponseDiagnostics,
}

/// The Hamiltonian as an explicit quadratic in the holdings:
/// `h(p) = −½ pᵀ Q p + bᵀ p + c`.
#[derive(Clone, Debug)]
pub struct ObsQuadratic {
    pub q: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: f64,
}

impl ObsQuadratic {
    pub fn new(
        snap: &CoefficientSnapshot,
        corr: &DMatrix<f64>,
        prefs: &InvestorPrefs,
        inc: &Incentives,
        mode: IndexationMode,
    ) -> Self {
        let n = snap.n_sources();
        let n_obs = inc.n_obs();
        let m = snap.drift();
        let s = snap.vol();
        // Rows 2.. of Σ^obs do not depend on the holdings.
        let s_obs = snap.sigma_obs(&DVector::from_element(n, 1.0), mode);
        let d = DMatrix::from_diagonal(&s);
        let dsd = &d * corr * &d;

        let mut q = DMatrix::from_diagonal(&prefs.beta);
        q -= &dsd * inc.g.get(0, 0);

        let mut b = prefs.beta.component_mul(&prefs.alpha) + &m * inc.z[0];
        for r in 1..n_obs {
            let g0r = inc.g.get(0, r);
            if g0r != 0.0 {
                let row = s_obs.row(r).transpose();
                b += (&d * corr * row) * g0r;
            }
        }

        let mut c = -0.5 * prefs.beta.iter().zip(prefs.alpha.iter()).map(|(bb, a)| bb * a * a).sum::<f64>();
        let mu = snap.mu_obs(&DVector::from_element(n, 1.0), mode);
        for r in 1..n_obs {
            c += inc.z[r] * mu[r];
            for rr in 1..n_obs {
                let a = (s_obs.row(r) * corr * s_obs.row(rr).transpose())[(0, 0)];
                c += 0.5 * inc.g.get(r, rr) * a;
            }
        }
        ObsQuadratic { q, b, c }
    }

    pub fn value(&self, p: &DVector<f64>) -> f64 {
        -0.5 * p.dot(&(&self.q * p)) + self.b.dot(p) + self.c
    }

    pub fn gradient(&self, p: &DVector<f64>) -> DVector<f64> {
        &self.b - &self.q * p
    }
}

/// Literal three-term evaluation `−k(p) + z·μ^obs + ½ Tr[g Σ^obs Σ Σ^obsᵀ]`.
pub fn h_obs_snapshot(
    snap: &CoefficientSnapshot,
    corr: &DMatrix<f64>,
    prefs: &InvestorPrefs,
    inc: &Incentives,
    p: &DVector<f64>,
    mode: IndexationMode,
) -> f64 {
    let mu = snap.mu_obs(p, mode);
    let so = snap.sigma_obs(p, mode);
    let a = &so * corr * so.transpose();
    -cost(prefs, p) + inc.z.dot(&mu) + 0.5 * inc.g.trace_product(&a)
}

pub fn h_obs(model: &MarketModel, prefs: &InvestorPrefs, t: f64, inc: &Incentives, p: &DVector<f64>) -> Result<f64> {
    check_dims(model, inc)?;
    model.control_box.check(p)?;
    let snap = eval_coefficients(model, t)?;
    Ok(h_obs_snapshot(&snap, &model.correlation, prefs, inc, p, model.mode))
}

/// Analytic gradient of `h^obs` in the holdings.
pub fn h_obs_gradient(
    model: &MarketModel,
    prefs: &InvestorPrefs,
    t: f64,
    inc: &Incentives,
    p: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dims(model, inc)?;
    let snap = eval_coefficients(model, t)?;
    Ok(ObsQuadratic::new(&snap, &model.correlation, prefs, inc, model.mode).gradient(p))
}

fn check_dims(model: &MarketModel, inc: &Incentives) -> Result<()> {
    if inc.n_obs() != model.n_obs() || inc.g.dim() != model.n_obs() {
        return Err(Error::Dimension(format!(
            "incentives have dimension {}, model has {} contractible variables",
            inc.n_obs(),
            model.n_obs()
        )));
    }
    Ok(())
}

/// Maximizes `h^obs` over the box, with lattice verification when the
/// dimension is at most four.
pub fn best_response(model: &MarketModel, prefs: &InvestorPrefs, t: f64, inc: &Incentives) -> Result<BestResponse> {
    check_dims(model, inc)?;
    let snap = eval_coefficients(model, t)?;
    let quad = ObsQuadratic::new(&snap, &model.correlation, prefs, inc, model.mode);
    let resp = maximize_quadratic(&quad, prefs, &model.control_box);
    if resp.p_hat.len() <= 4 {
        let best_lattice = lattice_max(&quad, &model.control_box, 9);
        if resp.h_value + 1e-9 < best_lattice {
            return Err(Error::OptimizerFailure(format!(
                "best response value {} below lattice maximum {}",
                resp.h_value, best_lattice
            )));
        }
    }
    Ok(resp)
}

/// Largest value of the quadratic over a `k^dim` uniform lattice of the box.
pub fn lattice_max(quad: &ObsQuadratic, bx: &ControlBox, k: usize) -> f64 {
    let n = quad.b.len();
    let pts: Vec<f64> = (0..k).map(|i| bx.epsilon + (bx.upper - bx.epsilon) * i as f64 / (k - 1) as f64).collect();
    let mut idx = vec![0usize; n];
    let mut best = f64::NEG_INFINITY;
    let mut p = DVector::zeros(n);
    loop {
        for i in 0..n {
            p[i] = pts[idx[i]];
        }
        best = best.max(quad.value(&p));
        let mut carry = 0;
        while carry < n {
            idx[carry] += 1;
            if idx[carry] < k {
                break;
            }
            idx[carry] = 0;
            carry += 1;
        }
        if carry == n {
            return best;
        }
    }
}

/// Multi-start projected Newton on `−h`, with a coordinate grid refinement
/// whenever the starts disagree or the quadratic is not strictly concave.
pub fn maximize_quadratic(quad: &ObsQuadratic, prefs: &InvestorPrefs, bx: &ControlBox) -> BestResponse {
    let n = quad.b.len();
    let lo = DVector::from_element(n, bx.epsilon);
    let hi = DVector::from_element(n, bx.upper);
    let neg = |p: &DVector<f64>| (-quad.value(p), -quad.gradient(p));
    let opts = BoxOptions { hessian: Some(quad.q.clone()), max_iter: 100, ..Default::default() };

    let alpha = bx.clamp_vec(&prefs.alpha);
    let starts = [
        alpha.clone(),
        (&alpha + &lo) * 0.5,
        (&alpha + &hi) * 0.5,
        bx.clamp_vec(&DVector::from_fn(n, |i, _| 0.5 * (alpha[i] + if i % 2 == 0 { bx.epsilon } else { bx.upper }))),
        unconstrained_diagonal(quad, bx),
    ];

    let mut cands: Vec<(DVector<f64>, f64)> = Vec::with_capacity(starts.len());
    let mut iterations = 0;
    for s in &starts {
        let r = minimize_box(neg, s, &lo, &hi, &opts);
        iterations += r.iterations;
        cands.push((r.x, -r.f));
    }
    let vmax = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let vmin = cands.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let starts_agree = vmax - vmin <= 1e-4;
    let concave = is_positive_definite(&quad.q);
    let mut used_grid_refine = false;

    if !starts_agree || !concave {
        used_grid_refine = true;
        let mut seeds: Vec<DVector<f64>> = cands.iter().map(|c| c.0.clone()).collect();
        if n <= 12 {
            seeds.extend(vertices(n, bx));
        }
        let mut best_seed = seeds[0].clone();
        let mut best_val = quad.value(&best_seed);
        for s in seeds {
            let v = quad.value(&s);
            if v > best_val {
                best_val = v;
                best_seed = s;
            }
        }
        let refined = coordinate_refine(quad, bx, best_seed);
        let polished = minimize_box(neg, &refined, &lo, &hi, &opts);
        iterations += polished.iterations;
        let vr = quad.value(&refined);
        cands.push((refined, vr));
        cands.push((polished.x, -polished.f));
    }

    let best = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let (p_hat, h_value) = cands
        .into_iter()
        .filter(|c| c.1 >= best - 1e-9)
        .min_by(|a, b| lexicographic(&a.0, &b.0))
        .expect("at least one candidate");
    BestResponse {
        p_hat,
        h_value,
        diagnostics: ResponseDiagnostics { starts_agree, concave, used_grid_refine, iterations },
    }
}

fn lexicographic(a: &DVector<f64>, b: &DVector<f64>) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    std::cmp::Ordering::Equal
}

/// Coordinatewise maximizer ignoring the off-diagonal curvature; equals the
/// exact answer when `g = 0`.
fn unconstrained_diagonal(quad: &ObsQuadratic, bx: &ControlBox) -> DVector<f64> {
    DVector::from_fn(quad.b.len(), |i, _| {
        let qii = quad.q[(i, i)];
        if qii > 0.0 {
            bx.clamp(quad.b[i] / qii)
        } else if quad.b[i] > 0.0 {
            bx.upper
        } else {
            bx.epsilon
        }
    })
}

fn vertices(n: usize, bx: &ControlBox) -> Vec<DVector<f64>> {
    (0..(1usize << n))
        .map(|mask| DVector::from_fn(n, |i, _| if mask >> i & 1 == 1 { bx.upper } else { bx.epsilon }))
        .collect()
}

fn coordinate_refine(quad: &ObsQuadratic, bx: &ControlBox, mut p: DVector<f64>) -> DVector<f64> {
    let steps = 200;
    let h = (bx.upper - bx.epsilon) / steps as f64;
    let mut val = quad.value(&p);
    for _ in 0..50 {
        let mut improved = false;
        for i in 0..p.len() {
            let keep = p[i];
            let mut best_x = keep;
            for k in 0..=steps {
                p[i] = bx.epsilon + h * k as f64;
                let v = quad.value(&p);
                if v > val + 1e-15 {
                    val = v;
                    best_x = p[i];
                    improved = true;
                }
            }
            p[i] = best_x;
        }
        if !improved {
            break;
        }
    }
    p
}

/// Sensitivity of the best response to the incentive parameters
/// (`z`, then the upper triangle of `g`), from the first-order conditions on
/// the coordinates strictly inside the box. Columns for parameters that do not
/// move the response are zero.
pub fn response_jacobian(
    snap: &CoefficientSnapshot,
    corr: &DMatrix<f64>,
    quad: &ObsQuadratic,
    p_hat: &DVector<f64>,
    bx: &ControlBox,
    n_obs: usize,
    mode: IndexationMode,
) -> DMatrix<f64> {
    let n = p_hat.len();
    let n_params = Incentives::n_params(n_obs);
    let mut jac = DMatrix::zeros(n, n_params);
    let tol = 1e-9 * (1.0 + bx.upper);
    let free: Vec<usize> = (0..n).filter(|&i| p_hat[i] > bx.epsilon + tol && p_hat[i] < bx.upper - tol).collect();
    if free.is_empty() {
        return jac;
    }
    let qff = DMatrix::from_fn(free.len(), free.len(), |i, j| quad.q[(free[i], free[j])]);
    let Some(chol) = qff.cholesky() else {
        return jac;
    };
    let m = snap.drift();
    let d = DMatrix::from_diagonal(&snap.vol());
    let s_obs = snap.sigma_obs(&DVector::from_element(n, 1.0), mode);
    let mut put = |col: usize, v: DVector<f64>| {
        let rhs = DVector::from_fn(free.len(), |i, _| v[free[i]]);
        let sol = chol.solve(&rhs);
        for (k, &i) in free.iter().enumerate() {
            jac[(i, col)] = sol[k];
        }
    };
    put(0, m);
    put(n_obs, &d * corr * &d * p_hat);
    for r in 1..n_obs {
        let col = n_obs + SymMatrix::packed_index(n_obs, 0, r);
        put(col, &d * corr * s_obs.row(r).transpose());
    }
    jac
}

/// Response to a rebate `c` per unit of green holding: maximizes
/// `c Σ pᵍ − k(p)` coordinatewise.
pub fn tax_best_response(model: &MarketModel, prefs: &InvestorPrefs, c: f64) -> Result<DVector<f64>> {
    if !(c >= 0.0) {
        return Err(Error::InvalidParameter(format!("tax rate must be nonnegative, got {c}")));
    }
    let bx = model.control_box;
    let d_g = model.d_g();
    let mut p = bx.clamp_vec(&prefs.alpha);
    for i in 0..d_g {
        if c > 0.0 {
            if prefs.beta[i] == 0.0 {
                return Err(Error::ZeroBetaWithTax { index: i });
            }
            p[i] = bx.clamp(prefs.alpha[i] + c / prefs.beta[i]);
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets::*;

    #[test]
    fn no_incentive_response_is_clamped_target() {
        let model = reference_market();
        let prefs = reference_investor();
        let r = best_response(&model, &prefs, 0.0, &Incentives::zeros(3)).unwrap();
        for (a, b) in r.p_hat.iter().zip([0.2, 0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(r.h_value.abs() < 1e-12);
    }

    #[test]
    fn pass_through_value() {
        let model = reference_market();
        let prefs = reference_investor();
        let p = DVector::from_vec(vec![0.5, 0.3, 1.0, 0.7]);
        let h = h_obs(&model, &prefs, 0.3, &Incentives::pass_through(3), &p).unwrap();
        let mu = crate::model::mu_obs(&model, 0.3, &p).unwrap();
        assert!((h - (-cost(&prefs, &p) + mu[0])).abs() < 1e-12);
    }

    #[test]
    fn tax_response_examples() {
        let model = reference_market();
        let prefs = reference_investor();
        let p = tax_best_response(&model, &prefs, 0.04).unwrap();
        assert!((p[0] - 0.3).abs() < 1e-12);
        assert_eq!(tax_best_response(&model, &prefs, 0.0).unwrap(), DVector::from_vec(vec![0.2, 0.2, 0.3, 0.5]));
        assert_eq!(tax_best_response(&model, &prefs, 100.0).unwrap()[0], 10.0);
        let mut zero = prefs.clone();
        zero.beta[0] = 0.0;
        assert!(matches!(tax_best_response(&model, &zero, 0.1), Err(Error::ZeroBetaWithTax { index: 0 })));
    }

    #[test]
    fn quadratic_form_matches_literal_formula() {
        let model = reference_market();
        let prefs = reference_investor();
        let snap = model.coefficients_at(0.2);
        let mut inc = Incentives::zeros(3);
        inc.z = DVector::from_vec(vec![0.7, -0.3, 0.4]);
        inc.g = SymMatrix::from_upper(3, vec![0.5, -0.2, 0.3, 0.8, 0.1, -0.4]).unwrap();
        let p = DVector::from_vec(vec![1.3, 0.4, 2.0, 0.8]);
        for mode in [IndexationMode::RiskSource, IndexationMode::Price] {
            let q = ObsQuadratic::new(&snap, &model.correlation, &prefs, &inc, mode);
            let lit = h_obs_snapshot(&snap, &model.correlation, &prefs, &inc, &p, mode);
            assert!((q.value(&p) - lit).abs() < 1e-12, "{mode:?}");
        }
    }
}
