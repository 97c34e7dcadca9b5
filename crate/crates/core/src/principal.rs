//! Government side: the pointwise criterion, its maximization over the
//! incentives, the resulting schedule on a time grid, the certainty
//! equivalent and the time-averaged contract.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::agent::{
    best_response, h_obs_snapshot, maximize_quadratic, response_jacobian, BestResponse, Incentives, ObsQuadratic,
};
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::model::{cost, eval_coefficients, CoefficientSnapshot, GovPrefs, InvestorPrefs, MarketModel};
use crate::optim::{minimize_box, project, BoxOptions};
use crate::rng::NormalStream;

/// Pointwise criterion evaluated literally from its definition.
///
/// The risk charge on the residual exposure `row₁(Σ^obs) − zᵀΣ^obs` is
/// weighted by `ν/2`, the factor produced by the exponential martingale of a
/// CARA Principal.
pub fn script_h(
    model: &MarketModel,
    prefs: &InvestorPrefs,
    gov: &GovPrefs,
    t: f64,
    inc: &Incentives,
    p: &DVector<f64>,
) -> Result<f64> {
    model.control_box.check(p)?;
    let snap = eval_coefficients(model, t)?;
    Ok(script_h_snapshot(&snap, &model.correlation, prefs, gov, inc, p, model.mode))
}

pub fn script_h_snapshot(
    snap: &CoefficientSnapshot,
    corr: &DMatrix<f64>,
    prefs: &InvestorPrefs,
    gov: &GovPrefs,
    inc: &Incentives,
    p: &DVector<f64>,
    mode: crate::model::IndexationMode,
) -> f64 {
    let mu = snap.mu_obs(p, mode);
    let so = snap.sigma_obs(p, mode);
    let a = &so * corr * so.transpose();
    let zzt = &inc.z * inc.z.transpose();
    let charge = inc.g.add(&SymMatrix::from_dense(&(zzt * prefs.gamma))).trace_product(&a);
    let h = h_obs_snapshot(snap, corr, prefs, inc, p, mode);
    let resid = so.row(0) - inc.z.transpose() * &so;
    let resid_var = (&resid * corr * resid.transpose())[(0, 0)];
    -gov.target_penalty(p) - 0.5 * charge + h + mu[0] - inc.z.dot(&mu) - 0.5 * gov.nu * resid_var
}

/// Criterion after substituting the best response, with its gradient in the
/// incentive parameters.
pub(crate) struct Objective<'a> {
    pub snap: CoefficientSnapshot,
    pub model: &'a MarketModel,
    pub prefs: &'a InvestorPrefs,
    pub gov: &'a GovPrefs,
}

pub(crate) struct Evaluation {
    pub value: f64,
    pub grad: DVector<f64>,
}

impl<'a> Objective<'a> {
    pub fn new(model: &'a MarketModel, prefs: &'a InvestorPrefs, gov: &'a GovPrefs, t: f64) -> Result<Self> {
        Ok(Objective { snap: eval_coefficients(model, t)?, model, prefs, gov })
    }

    pub fn evaluate(&self, inc: &Incentives) -> Evaluation {
        let model = self.model;
        let corr = &model.correlation;
        let quad = ObsQuadratic::new(&self.snap, corr, self.prefs, inc, model.mode);
        let response = maximize_quadratic(&quad, self.prefs, &model.control_box);
        let p = &response.p_hat;
        let n_obs = inc.n_obs();

        // With the best response substituted, g and z·μ^obs cancel and the
        // criterion reduces to
        //   −pen(p) − k(p) + p·m − ½γ zᵀAz − ½ν (e₁−z)ᵀA(e₁−z).
        let so = self.snap.sigma_obs(p, model.mode);
        let a = &so * corr * so.transpose();
        let m = self.snap.drift();
        let mut e1_z = -&inc.z;
        e1_z[0] += 1.0;
        let az = &a * &inc.z;
        let ae = &a * &e1_z;
        let (gamma, nu) = (self.prefs.gamma, self.gov.nu);
        let value = -self.gov.target_penalty(p) - cost(self.prefs, p) + p.dot(&m)
            - 0.5 * gamma * inc.z.dot(&az)
            - 0.5 * nu * e1_z.dot(&ae);

        let n_params = Incentives::n_params(n_obs);
        let mut grad = DVector::zeros(n_params);
        let dz = -&az * gamma + &ae * nu;
        grad.rows_mut(0, n_obs).copy_from(&dz);

        let jac = response_jacobian(&self.snap, corr, &quad, p, &model.control_box, n_obs, model.mode);
        if jac.amax() > 0.0 {
            let d = DMatrix::from_diagonal(&self.snap.vol());
            let w = self.gov.target_weight();
            let mut dp = m.clone() - self.prefs.beta.component_mul(&(p - &self.prefs.alpha));
            for (i, g) in self.gov.targets.iter().enumerate() {
                dp[i] -= 2.0 * w * (p[i] - g);
            }
            let sz = so.transpose() * &inc.z;
            let se = so.transpose() * &e1_z;
            dp -= &d * corr * sz * (gamma * inc.z[0]);
            dp -= &d * corr * se * (nu * e1_z[0]);
            grad += jac.transpose() * dp;
        }
        Evaluation { value, grad }
    }
}

/// Analytic gradient of the criterion (best response substituted) in
/// `z` followed by the upper triangle of `g`.
pub fn script_h_gradient(
    model: &MarketModel,
    prefs: &InvestorPrefs,
    gov: &GovPrefs,
    t: f64,
    inc: &Incentives,
) -> Result<(f64, DVector<f64>)> {
    let obj = Objective::new(model, prefs, gov, t)?;
    let e = obj.evaluate(inc);
    Ok((e.value, e.grad))
}

#[derive(Clone, Debug)]
pub struct PrincipalSettings {
    /// Bound on every incentive parameter.
    pub incentive_cap: f64,
    pub random_starts: usize,
    pub seed: u64,
}

impl Default for PrincipalSettings {
    fn default() -> Self {
        PrincipalSettings { incentive_cap: 10.0, random_starts: 2, seed: 7 }
    }
}

#[derive(Clone, Debug)]
pub struct PointwiseOptimum {
    pub incentives: Incentives,
    pub response: BestResponse,
    pub value: f64,
}

/// Positions in the parameter vector of `z_X` and the portfolio row of `g`:
/// the only incentives the investor's response depends on.
fn portfolio_row_indices(n_obs: usize) -> Vec<usize> {
    let mut idx = vec![0];
    idx.extend((0..n_obs).map(|j| n_obs + SymMatrix::packed_index(n_obs, 0, j)));
    idx
}

/// The criterion as a function of the portfolio-row incentives, with the
/// incentives on the contractible variables set to their optimum. Those enter
/// only the two quadratic risk charges, so their optimum is a small box QP.
struct Reduced<'a> {
    obj: Objective<'a>,
    n_obs: usize,
    outer: Vec<usize>,
    cap: f64,
}

impl Reduced<'_> {
    fn full(&self, outer: &DVector<f64>) -> DVector<f64> {
        let n_obs = self.n_obs;
        let mut theta = DVector::zeros(Incentives::n_params(n_obs));
        for (k, &i) in self.outer.iter().enumerate() {
            theta[i] = outer[k];
        }
        let inc = Incentives::from_params(n_obs, &theta);
        let model = self.obj.model;
        let corr = &model.correlation;
        let quad = ObsQuadratic::new(&self.obj.snap, corr, self.obj.prefs, &inc, model.mode);
        let p = maximize_quadratic(&quad, self.obj.prefs, &model.control_box).p_hat;
        let so = self.obj.snap.sigma_obs(&p, model.mode);
        let a = &so * corr * so.transpose();

        let m = n_obs - 1;
        let (gamma, nu) = (self.obj.prefs.gamma, self.obj.gov.nu);
        let zx = outer[0];
        let a_yy = a.view((1, 1), (m, m)).into_owned();
        let a_yx = a.view((1, 0), (m, 1)).column(0).into_owned();
        let hess = &a_yy * (gamma + nu);
        // Gradient of ½γ zᵀAz + ½ν eᵀAe in the contractible entries.
        let lin = &a_yx * (gamma * zx - nu * (1.0 - zx));
        let start = hess.clone().pseudo_inverse(1e-14).map(|pinv| -(pinv * &lin)).unwrap_or_else(|_| DVector::zeros(m));
        let lo = DVector::from_element(m, -self.cap);
        let hi = DVector::from_element(m, self.cap);
        let opts = BoxOptions { hessian: Some(hess.clone()), max_iter: 50, ..Default::default() };
        let y = minimize_box(|y| (0.5 * y.dot(&(&hess * y)) + lin.dot(y), &hess * y + &lin), &start, &lo, &hi, &opts).x;
        for i in 0..m {
            theta[1 + i] = y[i];
        }
        theta
    }

    /// Value and gradient in the portfolio-row incentives. The gradient is
    /// the full gradient's restriction, by the envelope theorem.
    fn evaluate(&self, outer: &DVector<f64>) -> (f64, DVector<f64>, DVector<f64>) {
        let theta = self.full(outer);
        let e = self.obj.evaluate(&Incentives::from_params(self.n_obs, &theta));
        let grad = DVector::from_fn(self.outer.len(), |k, _| e.grad[self.outer[k]]);
        (e.value, grad, theta)
    }
}

/// Points per axis of the seeding lattice over the portfolio-row incentives.
const SEED_LATTICE: usize = 5;
/// Best lattice points refined by local search.
const SEED_POLISH: usize = 4;
/// Best local optima refined further by compass search.
const PATTERN_CANDIDATES: usize = 2;
const PATTERN_ROUNDS: usize = 20;

/// Maximizes `f` over the box by polling coordinate and pairwise diagonal
/// directions, doubling along a direction while it improves and halving the
/// step when none does.
fn compass_search(
    f: impl Fn(&DVector<f64>) -> f64,
    x0: &DVector<f64>,
    f0: f64,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> (DVector<f64>, f64) {
    let n = x0.len();
    let mut dirs = Vec::new();
    for i in 0..n {
        for s in [1.0, -1.0] {
            dirs.push(DVector::from_fn(n, |k, _| if k == i { s } else { 0.0 }));
        }
        for j in i + 1..n {
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                dirs.push(DVector::from_fn(n, |k, _| if k == i { si } else if k == j { sj } else { 0.0 }));
            }
        }
    }
    let (mut x, mut fx) = (x0.clone(), f0);
    let mut step = 0.5;
    while step > 1e-6 {
        let mut moved = false;
        for d in &dirs {
            let mut s = step;
            loop {
                let y = project(&(&x + d * s), lo, hi);
                let fy = f(&y);
                if fy <= fx + 1e-13 {
                    break;
                }
                (x, fx) = (y, fy);
                moved = true;
                s *= 2.0;
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    (x, fx)
}

/// Maximizes the criterion at `t`. The incentives on the contractible
/// variables are solved out; the remaining portfolio-row incentives are
/// searched from the best points of a coarse lattice over the cap box, from
/// zero, pass-through, the warm start and random draws.
pub fn optimize_pointwise(
    model: &MarketModel,
    prefs: &InvestorPrefs,
    gov: &GovPrefs,
    t: f64,
    settings: &PrincipalSettings,
    warm_start: Option<&Incentives>,
) -> Result<PointwiseOptimum> {
    let n_obs = model.n_obs();
    let cap = settings.incentive_cap;
    let outer = portfolio_row_indices(n_obs);
    let dim = outer.len();
    let reduced = Reduced { obj: Objective::new(model, prefs, gov, t)?, n_obs, outer: outer.clone(), cap };
    let clamp_outer = |theta: &DVector<f64>| DVector::from_fn(dim, |k, _| theta[outer[k]].clamp(-cap, cap));

    let mut starts = vec![clamp_outer(&Incentives::zeros(n_obs).to_params()), clamp_outer(&Incentives::pass_through(n_obs).to_params())];
    if let Some(w) = warm_start {
        starts.push(clamp_outer(&w.to_params()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ t.to_bits());
    let mut normals = NormalStream::new(&mut rng);
    for _ in 0..settings.random_starts {
        starts.push(DVector::from_fn(dim, |_, _| (0.5 * normals.next()).clamp(-cap, cap)));
    }

    let axis: Vec<f64> = (0..SEED_LATTICE).map(|i| -cap + 2.0 * cap * i as f64 / (SEED_LATTICE - 1) as f64).collect();
    let mut lattice: Vec<(DVector<f64>, f64)> = (0..SEED_LATTICE.pow(dim as u32))
        .into_par_iter()
        .map(|mut code| {
            let x = DVector::from_fn(dim, |_, _| {
                let v = axis[code % SEED_LATTICE];
                code /= SEED_LATTICE;
                v
            });
            let v = reduced.evaluate(&x).0;
            (x, v)
        })
        .filter(|c| c.1.is_finite())
        .collect();
    lattice.sort_by(|a, b| b.1.total_cmp(&a.1));
    starts.extend(lattice.into_iter().take(SEED_POLISH).map(|c| c.0));

    let lo = DVector::from_element(dim, -cap);
    let hi = DVector::from_element(dim, cap);
    let opts = BoxOptions { max_iter: 300, grad_tol: 1e-8, f_tol: 1e-13, x_tol: 1e-10, hessian: None };
    let polish = |x: &DVector<f64>| {
        let r = minimize_box(
            |x| {
                let (v, g, _) = reduced.evaluate(x);
                (-v, -g)
            },
            x,
            &lo,
            &hi,
            &opts,
        );
        (r.x, -r.f)
    };
    let mut polished: Vec<(DVector<f64>, f64)> = starts.iter().map(polish).filter(|c| c.1.is_finite()).collect();
    polished.sort_by(|a, b| b.1.total_cmp(&a.1));
    polished.truncate(PATTERN_CANDIDATES);
    // The response has kinks where holdings hit their bounds, and gradient
    // steps stall on them; alternate with a compass search until neither moves.
    let mut best: Option<(DVector<f64>, f64)> = None;
    for (mut x, mut v) in polished {
        for _ in 0..PATTERN_ROUNDS {
            let (xp, vp) = compass_search(|y| reduced.evaluate(y).0, &x, v, &lo, &hi);
            if vp <= v + 1e-12 {
                break;
            }
            let (xb, vb) = polish(&xp);
            (x, v) = if vb > vp { (xb, vb) } else { (xp, vp) };
        }
        if best.as_ref().map_or(true, |b| v > b.1 + 1e-12) {
            best = Some((x, v));
        }
    }
    let (x, _) = best.ok_or_else(|| Error::OptimizerFailure("no finite candidate".into()))?;
    let incentives = Incentives::from_params(n_obs, &reduced.full(&x));
    let response = best_response(model, prefs, t, &incentives)?;
    let value = script_h(model, prefs, gov, t, &incentives, &response.p_hat)?;
    Ok(PointwiseOptimum { incentives, response, value })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleNode {
    pub t: f64,
    pub incentives: Incentives,
    pub p: DVector<f64>,
    pub h_value: f64,
    pub script_h: f64,
}

/// Piecewise-constant incentives on a uniform grid; node `i` applies on
/// `[tᵢ, tᵢ₊₁)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IncentiveSchedule {
    pub nodes: Vec<ScheduleNode>,
}

impl IncentiveSchedule {
    pub fn times(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.t).collect()
    }

    pub fn horizon(&self) -> f64 {
        self.nodes.last().map_or(0.0, |n| n.t)
    }

    /// Number of intervals.
    pub fn m(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Node governing time `t` on a grid of `n_steps` uniform steps.
    pub fn node_for_step(&self, step: usize, n_steps: usize) -> Result<&ScheduleNode> {
        let m = self.m();
        if n_steps % m != 0 {
            return Err(Error::GridMismatch(format!(
                "{n_steps} simulation steps do not refine a schedule with {m} intervals"
            )));
        }
        Ok(&self.nodes[step / (n_steps / m)])
    }

    pub fn trapezoid(&self, f: impl Fn(&ScheduleNode) -> f64) -> f64 {
        self.nodes.windows(2).map(|w| 0.5 * (w[1].t - w[0].t) * (f(&w[0]) + f(&w[1]))).sum()
    }
}

pub fn solve_schedule(
    model: &MarketModel,
    prefs: &InvestorPrefs,
    gov: &GovPrefs,
    m: usize,
    settings: &PrincipalSettings,
) -> Result<IncentiveSchedule> {
    if m == 0 {
        return Err(Error::InvalidParameter("schedule needs at least one interval".into()));
    }
    let mut nodes: Vec<ScheduleNode> = Vec::with_capacity(m + 1);
    for i in 0..=m {
        let t = model.horizon * i as f64 / m as f64;
        let warm = nodes.last().map(|n| &n.incentives);
        let opt = optimize_pointwise(model, prefs, gov, t, settings, warm).map_err(|e| Error::at_node(i, e))?;
        nodes.push(ScheduleNode {
            t,
            p: opt.response.p_hat.clone(),
            h_value: opt.response.h_value,
            script_h: opt.value,
            incentives: opt.incentives,
        });
    }
    Ok(IncentiveSchedule { nodes })
}

/// Trapezoidal integral of the optimal criterion over the schedule.
pub fn certainty_equivalent(schedule: &IncentiveSchedule) -> f64 {
    schedule.trapezoid(|n| n.script_h)
}

/// `U_P(ce) = −exp(−ν ce)`.
pub fn principal_utility(ce: f64, gov: &GovPrefs) -> f64 {
    -(-gov.nu * ce).exp()
}

/// Constant incentives equal to the time averages of a schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct AveragedContract {
    pub z_bar: DVector<f64>,
    pub g_bar: SymMatrix,
    /// `∫ h^obs(t, z̄, ḡ, π̂(t, z̄, ḡ)) dt`.
    pub coupon_integral: f64,
    pub y0: f64,
    /// Best response to the averaged incentives at each schedule time.
    pub responses: Vec<(f64, DVector<f64>, f64)>,
}

impl AveragedContract {
    pub fn incentives(&self) -> Incentives {
        Incentives { z: self.z_bar.clone(), g: self.g_bar.clone() }
    }

    /// Time average of the best response to the averaged incentives.
    pub fn mean_response(&self) -> DVector<f64> {
        let r = &self.responses;
        let mut acc = DVector::zeros(r[0].1.len());
        for w in r.windows(2) {
            acc += (&w[0].1 + &w[1].1) * (0.5 * (w[1].0 - w[0].0));
        }
        acc / (r.last().unwrap().0 - r[0].0)
    }

    /// The averaged contract as a (constant) schedule on the same grid.
    pub fn as_schedule(&self, model: &MarketModel, prefs: &InvestorPrefs, gov: &GovPrefs) -> Result<IncentiveSchedule> {
        let inc = self.incentives();
        let nodes = self
            .responses
            .iter()
            .map(|(t, p, h)| {
                Ok(ScheduleNode {
                    t: *t,
                    incentives: inc.clone(),
                    p: p.clone(),
                    h_value: *h,
                    script_h: script_h(model, prefs, gov, *t, &inc, p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(IncentiveSchedule { nodes })
    }
}

pub fn average_schedule(model: &MarketModel, prefs: &InvestorPrefs, schedule: &IncentiveSchedule) -> Result<AveragedContract> {
    let span = schedule.horizon() - schedule.nodes[0].t;
    let n_obs = schedule.nodes[0].incentives.n_obs();
    let z_bar = DVector::from_fn(n_obs, |i, _| schedule.trapezoid(|n| n.incentives.z[i]) / span);
    let n_up = n_obs * (n_obs + 1) / 2;
    let upper: Vec<f64> = (0..n_up).map(|k| schedule.trapezoid(|n| n.incentives.g.upper()[k]) / span).collect();
    let g_bar = SymMatrix::from_upper(n_obs, upper)?;
    let inc = Incentives { z: z_bar.clone(), g: g_bar.clone() };
    let responses = schedule
        .nodes
        .iter()
        .map(|n| {
            let r = best_response(model, prefs, n.t, &inc)?;
            Ok((n.t, r.p_hat, r.h_value))
        })
        .collect::<Result<Vec<_>>>()?;
    let coupon_integral = responses.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].2 + w[1].2)).sum();
    Ok(AveragedContract { z_bar, g_bar, coupon_integral, y0: 0.0, responses })
}

fn schedule_header(model: &MarketModel) -> Vec<String> {
    let d_g = model.d_g();
    let mut obs = vec!["X".to_string()];
    obs.extend((1..=d_g).map(|i| format!("g{i}")));
    obs.push("I".into());
    let mut cols = vec!["t".to_string()];
    cols.extend(obs.iter().map(|o| format!("z_{o}")));
    let n = obs.len();
    for i in 0..n {
        for j in i..n {
            cols.push(format!("g_{}_{}", obs[i], obs[j]));
        }
    }
    cols.extend((1..=d_g).map(|i| format!("pi_g{i}")));
    cols.extend((1..=model.d_c()).map(|i| format!("pi_c{i}")));
    cols.push("pi_I".into());
    cols.push("h_obs".into());
    cols.push("script_H".into());
    cols
}

/// Writes the schedule as CSV, preceded by a `# key=value` provenance line.
pub fn write_schedule_csv<W: Write>(
    model: &MarketModel,
    schedule: &IncentiveSchedule,
    provenance: &str,
    mut out: W,
) -> Result<()> {
    writeln!(out, "# {provenance}")?;
    writeln!(out, "{}", schedule_header(model).join(","))?;
    for n in &schedule.nodes {
        let mut row = vec![n.t];
        row.extend(n.incentives.z.iter());
        row.extend(n.incentives.g.upper());
        row.extend(n.p.iter());
        row.push(n.h_value);
        row.push(n.script_h);
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Reads a schedule written by [`write_schedule_csv`]; returns it with the
/// provenance line.
pub fn read_schedule_csv<R: BufRead>(model: &MarketModel, input: R) -> Result<(IncentiveSchedule, String)> {
    let n_obs = model.n_obs();
    let n_src = model.n_sources();
    let header = schedule_header(model);
    let mut provenance = String::new();
    let mut nodes = Vec::new();
    for (k, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        if let Some(rest) = line.strip_prefix('#') {
            provenance = rest.trim().to_string();
            continue;
        }
        if line.starts_with('t') {
            if line.split(',').map(str::to_string).collect::<Vec<_>>() != header {
                return Err(Error::Parse { line: lineno, message: "schedule columns do not match the model".into() });
            }
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        if vals.len() != header.len() {
            return Err(Error::Parse { line: lineno, message: format!("{} fields, expected {}", vals.len(), header.len()) });
        }
        let n_up = n_obs * (n_obs + 1) / 2;
        let z = DVector::from_column_slice(&vals[1..1 + n_obs]);
        let g = SymMatrix::from_upper(n_obs, vals[1 + n_obs..1 + n_obs + n_up].to_vec())?;
        let off = 1 + n_obs + n_up;
        let p = DVector::from_column_slice(&vals[off..off + n_src]);
        nodes.push(ScheduleNode {
            t: vals[0],
            incentives: Incentives { z, g },
            p,
            h_value: vals[off + n_src],
            script_h: vals[off + n_src + 1],
        });
    }
    if nodes.len() < 2 {
        return Err(Error::Parse { line: 0, message: "schedule needs at least two nodes".into() });
    }
    Ok((IncentiveSchedule { nodes }, provenance))
}
