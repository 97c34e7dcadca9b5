use std::collections::HashMap;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{check_model, Derivatives, HjbGrid, LocalProblem, DIM, R, WG, WI, X};
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::mc::{RateDrift, RateModel};
use crate::model::{GovPrefs, InvestorPrefs, MarketModel};
use crate::optim::{minimize_box, BoxOptions};
use crate::rng::NormalStream;

#[derive(Clone, Debug, PartialEq)]
pub struct HjbSettings {
    pub incentive_cap: f64,
    pub random_starts: usize,
    pub seed: u64,
    /// Relative change of a layer below which the fixed point stops.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Resolution of the normalized derivatives used to share pointwise
    /// optimizations between nodes.
    pub key_resolution: f64,
}

impl Default for HjbSettings {
    fn default() -> Self {
        HjbSettings {
            incentive_cap: 10.0,
            random_starts: 2,
            seed: 7,
            tolerance: 1e-6,
            max_iterations: 20,
            key_resolution: 1e-7,
        }
    }
}

/// Optimal feedback at a group of nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeControl {
    /// `(z_X, g_XX, g_Xg, g_XI)`.
    pub theta: [f64; 4],
    pub z: [f64; DIM],
    pub p: Vec<f64>,
    pub mu: [f64; DIM],
    /// Row-major covariation of the state.
    pub a: [f64; DIM * DIM],
    pub script_h: f64,
}

impl NodeControl {
    fn with_rest(lp: &LocalProblem, theta: [f64; 4], rest: [f64; 3]) -> Self {
        let (mut z, g) = incentives(theta);
        z[WG] = rest[0];
        z[R] = rest[1];
        z[WI] = rest[2];
        let (p, _) = lp.best_response(&z, &g);
        Self::assemble(lp, theta, &z, &g, p)
    }

    fn from_theta(lp: &LocalProblem, theta: [f64; 4], d: &Derivatives) -> Self {
        let (z, g, p) = lp.incentives_from(&theta, d);
        Self::assemble(lp, theta, &z, &g, p)
    }

    fn assemble(lp: &LocalProblem, theta: [f64; 4], z: &DVector<f64>, g: &SymMatrix, p: DVector<f64>) -> Self {
        let mu = lp.mu(&p);
        let a = lp.covariation(&p);
        let script_h = lp.script_h(z, g, &p);
        NodeControl {
            theta,
            z: [z[0], z[1], z[2], z[3]],
            p: p.iter().copied().collect(),
            mu: [mu[0], mu[1], mu[2], mu[3]],
            a: std::array::from_fn(|k| a[(k / DIM, k % DIM)]),
            script_h,
        }
    }

    fn rest(&self) -> [f64; 3] {
        [self.z[WG], self.z[R], self.z[WI]]
    }

    pub fn a_at(&self, i: usize, j: usize) -> f64 {
        self.a[i * DIM + j]
    }

    /// Incentives on the four state variables.
    pub fn incentives(&self) -> (DVector<f64>, SymMatrix) {
        let (_, g) = incentives(self.theta);
        (DVector::from_row_slice(&self.z), g)
    }

    /// Drift of the state in the linear part of the equation.
    fn transport(&self, nu: f64, axis: usize) -> f64 {
        let mut e = [-self.z[0], -self.z[1], -self.z[2], -self.z[3]];
        e[X] += 1.0;
        self.mu[axis] - nu * (0..DIM).map(|j| self.a_at(axis, j) * e[j]).sum::<f64>()
    }
}

fn incentives(theta: [f64; 4]) -> (DVector<f64>, SymMatrix) {
    let mut z = DVector::zeros(DIM);
    z[X] = theta[0];
    let mut g = SymMatrix::zeros(DIM);
    g.set(X, X, theta[1]);
    g.set(X, WG, theta[2]);
    g.set(X, WI, theta[3]);
    (z, g)
}

/// One time layer: values, and per node an index into a table of shared
/// controls.
#[derive(Clone, Debug, PartialEq)]
pub struct HjbLayer {
    pub t: f64,
    pub u: Vec<f64>,
    pub index: Vec<u32>,
    pub records: Vec<NodeControl>,
    pub iterations: usize,
}

impl HjbLayer {
    pub fn control(&self, node: usize) -> &NodeControl {
        &self.records[self.index[node] as usize]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HjbSolution {
    pub grid: HjbGrid,
    pub rate: RateModel,
    pub nu: f64,
    /// Green rate at time zero.
    pub rate_start: f64,
    /// `layers[n]` holds time `t_n`; the last layer is terminal.
    pub layers: Vec<HjbLayer>,
}

impl HjbSolution {
    /// Corner nodes and weights for multilinear interpolation at `b`, and
    /// whether `b` was clamped into the grid.
    pub fn stencil(&self, b: [f64; DIM]) -> (Vec<(usize, f64)>, bool) {
        stencil(&self.grid, b)
    }

    pub fn value_at(&self, layer: usize, b: [f64; DIM]) -> f64 {
        let (st, _) = self.stencil(b);
        st.iter().map(|&(k, w)| w * self.layers[layer].u[k]).sum()
    }

    /// Holdings interpolated from the feedback at `b`.
    pub fn policy_at(&self, layer: usize, b: [f64; DIM]) -> DVector<f64> {
        let (st, _) = self.stencil(b);
        let l = &self.layers[layer];
        let n = l.records[0].p.len();
        let mut p = DVector::zeros(n);
        for &(k, w) in &st {
            p += DVector::from_row_slice(&l.control(k).p) * w;
        }
        p
    }

    /// Initial state `(0, 0, r₀, 0)`.
    pub fn initial_state(&self) -> [f64; DIM] {
        let r = &self.grid.axes[R];
        let r0 = if r.n == 1 { r.lo } else { self.rate_start };
        [0.0, 0.0, r0, 0.0]
    }

    pub fn u0(&self) -> f64 {
        self.value_at(0, self.initial_state())
    }

    /// `−ln(−U(0, b₀)) / ν`.
    pub fn certainty_equivalent(&self) -> f64 {
        -(-self.u0()).ln() / self.nu
    }
}

pub fn stencil(grid: &HjbGrid, b: [f64; DIM]) -> (Vec<(usize, f64)>, bool) {
    let st = grid.strides();
    let mut clamped = false;
    let mut out = vec![(0usize, 1.0)];
    for d in 0..DIM {
        let (i, w, c) = grid.axes[d].locate(b[d]);
        clamped |= c;
        if grid.axes[d].n == 1 {
            continue;
        }
        let mut next = Vec::with_capacity(out.len() * 2);
        for &(k, wt) in &out {
            next.push((k + i * st[d], wt * (1.0 - w)));
            next.push((k + (i + 1) * st[d], wt * w));
        }
        out = next;
    }
    (out, clamped)
}

/// Stencil of a first difference along one axis: `(lower, upper, spacing)`.
fn first_diff(i: usize, n: usize, h: f64) -> (usize, usize, f64) {
    if i == 0 {
        (0, 1, h)
    } else if i == n - 1 {
        (n - 2, n - 1, h)
    } else {
        (i - 1, i + 1, 2.0 * h)
    }
}

struct Layout<'g> {
    grid: &'g HjbGrid,
    shape: [usize; DIM],
    strides: [usize; DIM],
    h: [f64; DIM],
    live: Vec<usize>,
}

impl<'g> Layout<'g> {
    fn new(grid: &'g HjbGrid) -> Self {
        let live = (0..DIM).filter(|&d| grid.axes[d].n > 1).collect();
        Layout {
            grid,
            shape: grid.shape(),
            strides: grid.strides(),
            h: std::array::from_fn(|d| grid.axes[d].h()),
            live,
        }
    }

    fn n(&self) -> usize {
        self.grid.n_nodes()
    }

    fn first(&self, u: &[f64], k: usize, idx: &[usize; DIM], d: usize) -> f64 {
        let (lo, hi, den) = first_diff(idx[d], self.shape[d], self.h[d]);
        let base = k - idx[d] * self.strides[d];
        (u[base + hi * self.strides[d]] - u[base + lo * self.strides[d]]) / den
    }

    fn second(&self, u: &[f64], k: usize, idx: &[usize; DIM], d: usize) -> f64 {
        let i = idx[d];
        if i == 0 || i == self.shape[d] - 1 {
            return 0.0;
        }
        let s = self.strides[d];
        (u[k + s] - 2.0 * u[k] + u[k - s]) / (self.h[d] * self.h[d])
    }

    fn mixed(&self, u: &[f64], k: usize, idx: &[usize; DIM], a: usize, b: usize) -> f64 {
        let (alo, ahi, aden) = first_diff(idx[a], self.shape[a], self.h[a]);
        let (blo, bhi, bden) = first_diff(idx[b], self.shape[b], self.h[b]);
        let base = k - idx[a] * self.strides[a] - idx[b] * self.strides[b];
        let at = |i: usize, j: usize| u[base + i * self.strides[a] + j * self.strides[b]];
        (at(ahi, bhi) - at(ahi, blo) - at(alo, bhi) + at(alo, blo)) / (aden * bden)
    }

    fn derivatives(&self, u: &[f64], k: usize) -> Derivatives {
        let idx = self.grid.unindex(k);
        let mut d = Derivatives::flat(u[k]);
        for (n, &a) in self.live.iter().enumerate() {
            d.u_b[a] = self.first(u, k, &idx, a);
            d.u_bb[(a, a)] = self.second(u, k, &idx, a);
            for &b in &self.live[n + 1..] {
                let m = self.mixed(u, k, &idx, a, b);
                d.u_bb[(a, b)] = m;
                d.u_bb[(b, a)] = m;
            }
        }
        d
    }
}

/// Derivatives normalized by `|u|`, quantized, plus the rate node.
type Key = (usize, [i64; DIM + DIM * (DIM + 1) / 2]);

fn key_of(d: &Derivatives, r_idx: usize, res: f64) -> Key {
    let s = 1.0 / d.u.abs();
    let mut q = [0i64; DIM + DIM * (DIM + 1) / 2];
    for i in 0..DIM {
        q[i] = (d.u_b[i] * s / res).round() as i64;
    }
    let mut n = DIM;
    for i in 0..DIM {
        for j in i..DIM {
            q[n] = (d.u_bb[(i, j)] * s / res).round() as i64;
            n += 1;
        }
    }
    (r_idx, q)
}

fn derivatives_of_key(key: &Key, res: f64) -> Derivatives {
    let q = &key.1;
    let mut d = Derivatives::flat(-1.0);
    for i in 0..DIM {
        d.u_b[i] = q[i] as f64 * res;
    }
    let mut n = DIM;
    for i in 0..DIM {
        for j in i..DIM {
            d.u_bb[(i, j)] = q[n] as f64 * res;
            d.u_bb[(j, i)] = q[n] as f64 * res;
            n += 1;
        }
    }
    d
}

/// Maximizes the Hamiltonian over `(z_X, g_XX, g_Xg, g_XI)` for `u = −1`.
fn optimize_node(lp: &LocalProblem, d: &Derivatives, warm: Option<[f64; 4]>, settings: &HjbSettings) -> NodeControl {
    let cap = settings.incentive_cap;
    let lo = DVector::from_element(4, -cap);
    let hi = DVector::from_element(4, cap);
    let nu = lp.gov.nu;
    let f = |th: &DVector<f64>| {
        let theta = [th[0], th[1], th[2], th[3]];
        let (z, g, p) = lp.incentives_from(&theta, d);
        -lp.hamiltonian_at(&z, &g, &p, d) / (nu * d.u.abs())
    };

    let mut starts = vec![DVector::zeros(4), DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0])];
    if let Some(w) = warm {
        starts.push(DVector::from_row_slice(&w));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ lp.snap.t.to_bits() ^ lp.snap.r_g[0].to_bits().rotate_left(17));
    let mut normals = NormalStream::new(&mut rng);
    for _ in 0..settings.random_starts {
        starts.push(DVector::from_fn(4, |_, _| (0.5 * normals.next()).clamp(-cap, cap)));
    }

    let opts = BoxOptions { max_iter: 200, grad_tol: 1e-8, f_tol: 1e-13, x_tol: 1e-10, hessian: None };
    let step = 1e-6;
    let mut best: Option<(DVector<f64>, f64)> = None;
    for s in &starts {
        let r = minimize_box(
            |th| {
                let v = f(th);
                let grad = DVector::from_fn(4, |i, _| {
                    let mut a = th.clone();
                    let mut b = th.clone();
                    a[i] += step;
                    b[i] -= step;
                    (f(&a) - f(&b)) / (2.0 * step)
                });
                (v, grad)
            },
            s,
            &lo,
            &hi,
            &opts,
        );
        if r.f.is_finite() && best.as_ref().map_or(true, |b| r.f < b.1 - 1e-12) {
            best = Some((r.x, r.f));
        }
    }
    let th = best.map(|b| b.0).unwrap_or_else(|| DVector::zeros(4));
    NodeControl::from_theta(lp, [th[0], th[1], th[2], th[3]], d)
}

struct Context<'a> {
    model: &'a MarketModel,
    prefs: &'a InvestorPrefs,
    gov: &'a GovPrefs,
    rate: RateModel,
    settings: &'a HjbSettings,
    layout: Layout<'a>,
    r_idx: Vec<usize>,
}

impl<'a> Context<'a> {
    fn r_values(&self, t: f64) -> Vec<f64> {
        let axis = &self.layout.grid.axes[R];
        if axis.n == 1 {
            vec![self.model.coefficients_at(t).r_g[0]]
        } else {
            (0..axis.n).map(|i| axis.x(i)).collect()
        }
    }

    fn problems(&self, t: f64) -> Result<Vec<LocalProblem<'a>>> {
        self.r_values(t)
            .into_iter()
            .map(|r| LocalProblem::new(self.model, self.prefs, self.gov, &self.rate, t, r))
            .collect()
    }

    /// Optimal controls at every node for the derivatives of `u`, sharing
    /// one optimization per key.
    fn optimize(
        &self,
        lps: &[LocalProblem],
        u: &[f64],
        warm: Option<(&[u32], &[NodeControl])>,
    ) -> (Vec<u32>, Vec<NodeControl>) {
        let res = self.settings.key_resolution;
        let keys: Vec<Key> = (0..self.layout.n())
            .into_par_iter()
            .map(|k| key_of(&self.layout.derivatives(u, k), self.r_idx[k], res))
            .collect();
        let mut table: HashMap<Key, u32> = HashMap::new();
        let mut reps: Vec<(Key, usize)> = Vec::new();
        let index: Vec<u32> = keys
            .into_iter()
            .enumerate()
            .map(|(k, key)| {
                *table.entry(key).or_insert_with_key(|key| {
                    reps.push((*key, k));
                    (reps.len() - 1) as u32
                })
            })
            .collect();
        let records = reps
            .par_iter()
            .map(|(key, k)| {
                let d = derivatives_of_key(key, res);
                let w = warm.map(|(idx, recs)| recs[idx[*k] as usize].theta);
                optimize_node(&lps[key.0], &d, w, self.settings)
            })
            .collect();
        (index, records)
    }

    /// Controls of another layer re-evaluated at this layer's coefficients.
    fn carry(&self, lps: &[LocalProblem], index: &[u32], records: &[NodeControl]) -> (Vec<u32>, Vec<NodeControl>) {
        self.combine(lps, index, records, index, records, |a, _| (a.theta, a.rest()))
    }

    fn combine(
        &self,
        lps: &[LocalProblem],
        ia: &[u32],
        ra: &[NodeControl],
        ib: &[u32],
        rb: &[NodeControl],
        f: impl Fn(&NodeControl, &NodeControl) -> ([f64; 4], [f64; 3]) + Sync,
    ) -> (Vec<u32>, Vec<NodeControl>) {
        let mut table: HashMap<(usize, u32, u32), u32> = HashMap::new();
        let mut reps: Vec<(usize, u32, u32)> = Vec::new();
        let index = (0..self.layout.n())
            .map(|k| {
                let key = (self.r_idx[k], ia[k], ib[k]);
                *table.entry(key).or_insert_with(|| {
                    reps.push(key);
                    (reps.len() - 1) as u32
                })
            })
            .collect();
        let records = reps
            .par_iter()
            .map(|&(r, a, b)| {
                let (theta, rest) = f(&ra[a as usize], &rb[b as usize]);
                NodeControl::with_rest(&lps[r], theta, rest)
            })
            .collect();
        (index, records)
    }

    /// One backward step from `prev` with frozen controls: explicit mixed
    /// derivatives, the exact reaction factor, then implicit sweeps.
    fn advance(&self, layer: usize, prev: &[f64], index: &[u32], records: &[NodeControl]) -> Result<Vec<f64>> {
        let lay = &self.layout;
        let dt = lay.grid.dt();
        let nu = self.gov.nu;
        let mut w: Vec<f64> = (0..lay.n())
            .into_par_iter()
            .map(|k| {
                let rec = &records[index[k] as usize];
                let mut v = prev[k];
                let idx = lay.grid.unindex(k);
                for (n, &a) in lay.live.iter().enumerate() {
                    for &b in &lay.live[n + 1..] {
                        let c = rec.a_at(a, b);
                        if c != 0.0 {
                            v += dt * c * lay.mixed(prev, k, &idx, a, b);
                        }
                    }
                }
                v * (-nu * rec.script_h * dt).exp()
            })
            .collect();
        for &d in &lay.live {
            self.sweep(d, &mut w, index, records);
        }
        if let Some((_, &v)) = w.iter().enumerate().find(|(_, v)| !(**v <= 0.0)) {
            return Err(Error::UnstableStep { layer, value: v });
        }
        Ok(w)
    }

    /// Implicit upwind solve along axis `d`.
    fn sweep(&self, d: usize, w: &mut [f64], index: &[u32], records: &[NodeControl]) {
        let lay = &self.layout;
        let n = lay.shape[d];
        let s = lay.strides[d];
        let h = lay.h[d];
        let dt = lay.grid.dt();
        let nu = self.gov.nu;
        let n_lines = lay.n() / n;
        let src: &[f64] = w;
        let solved: Vec<(usize, Vec<f64>)> = (0..n_lines)
            .into_par_iter()
            .map(|l| {
                let base = (l / s) * s * n + l % s;
                let mut lower = vec![0.0; n];
                let mut diag = vec![1.0; n];
                let mut upper = vec![0.0; n];
                let mut rhs: Vec<f64> = (0..n).map(|i| src[base + i * s]).collect();
                for i in 0..n {
                    let rec = &records[index[base + i * s] as usize];
                    let beta = rec.transport(nu, d);
                    if i == 0 || i == n - 1 {
                        // Linear extrapolation: no curvature, one-sided slope.
                        let (lo, hi) = if i == 0 { (0, 1) } else { (n - 2, n - 1) };
                        let inflow = (i == 0 && beta >= 0.0) || (i == n - 1 && beta <= 0.0);
                        if inflow {
                            let c = dt * beta / h;
                            if i == 0 {
                                diag[i] += c;
                                upper[i] -= c;
                            } else {
                                diag[i] -= c;
                                lower[i] += c;
                            }
                        } else {
                            rhs[i] += dt * beta * (src[base + hi * s] - src[base + lo * s]) / h;
                        }
                        continue;
                    }
                    let diff = 0.5 * rec.a_at(d, d) / (h * h);
                    let bp = beta.max(0.0) / h;
                    let bm = beta.min(0.0) / h;
                    lower[i] = dt * (bm - diff);
                    upper[i] = -dt * (bp + diff);
                    diag[i] = 1.0 + dt * (bp - bm + 2.0 * diff);
                }
                (base, thomas(&lower, &diag, &upper, &rhs))
            })
            .collect();
        for (base, vals) in solved {
            for (i, v) in vals.into_iter().enumerate() {
                w[base + i * s] = v;
            }
        }
    }
}

fn thomas(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    cp[0] = c[0] / b[0];
    dp[0] = d[0] / b[0];
    for i in 1..n {
        let m = b[i] - a[i] * cp[i - 1];
        cp[i] = c[i] / m;
        dp[i] = (d[i] - a[i] * dp[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
    x
}

fn validate_rate(rate: &RateModel) -> Result<()> {
    let theta = match rate.drift {
        RateDrift::Ou { theta, m } => {
            if !m.is_finite() {
                return Err(Error::InvalidParameter("rate mean must be finite".into()));
            }
            theta
        }
        RateDrift::CurveReverting { theta } => theta,
    };
    if !(theta >= 0.0) || !(rate.sigma_r >= 0.0) || !rate.sigma_r.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "rate model needs theta >= 0 and sigma_r >= 0, got theta = {theta}, sigma_r = {}",
            rate.sigma_r
        )));
    }
    Ok(())
}

/// Backward induction from `U(T) = −1`. A single-node rate axis pins the
/// rate to the deterministic green curve and ignores the rate dynamics.
pub fn solve_hjb(
    model: &MarketModel,
    prefs: &InvestorPrefs,
    gov: &GovPrefs,
    rate: &RateModel,
    grid: &HjbGrid,
    settings: &HjbSettings,
) -> Result<HjbSolution> {
    check_model(model)?;
    grid.validate()?;
    validate_rate(rate)?;
    if !(gov.nu > 0.0) {
        return Err(Error::InvalidParameter(format!("nu must be positive, got {}", gov.nu)));
    }
    let mut effective = rate.clone();
    if grid.rate_frozen() {
        effective.sigma_r = 0.0;
    }
    let layout = Layout::new(grid);
    let r_idx = (0..grid.n_nodes()).map(|k| grid.unindex(k)[R]).collect();
    let ctx = Context { model, prefs, gov, rate: effective, settings, layout, r_idx };
    let n_t = grid.n_t;
    let n = grid.n_nodes();

    let t_end = grid.time(n_t);
    let lps = ctx.problems(t_end)?;
    let u_end = vec![-1.0; n];
    let (index, records) = ctx.optimize(&lps, &u_end, None);
    let mut layers = vec![HjbLayer { t: t_end, u: u_end, index, records, iterations: 0 }];

    for layer in (0..n_t).rev() {
        let t = grid.time(layer);
        let lps = ctx.problems(t)?;
        let prev = layers.last().expect("terminal layer");
        let (mut index, mut records) = ctx.carry(&lps, &prev.index, &prev.records);
        let mut current: Option<Vec<f64>> = None;
        let mut last_sign = 0.0;
        let mut done = None;
        for it in 1..=settings.max_iterations {
            let u = ctx.advance(layer, &prev.u, &index, &records)?;
            if let Some(cur) = &current {
                let scale = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let change = u.iter().zip(cur).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                if change <= settings.tolerance * scale {
                    done = Some((u, it));
                    break;
                }
                let sign: f64 = u.iter().zip(cur).map(|(a, b)| a - b).sum();
                let oscillating = sign * last_sign < 0.0;
                last_sign = sign;
                let (ni, nr) = ctx.optimize(&lps, &u, Some((&index, &records)));
                if oscillating {
                    let (di, dr) = ctx.combine(&lps, &index, &records, &ni, &nr, |a, b| {
                        (
                            std::array::from_fn(|i| 0.5 * (a.theta[i] + b.theta[i])),
                            std::array::from_fn(|i| 0.5 * (a.rest()[i] + b.rest()[i])),
                        )
                    });
                    index = di;
                    records = dr;
                } else {
                    index = ni;
                    records = nr;
                }
            } else {
                let (ni, nr) = ctx.optimize(&lps, &u, Some((&index, &records)));
                index = ni;
                records = nr;
            }
            current = Some(u);
        }
        let (u, iterations) =
            done.ok_or(Error::NonConvergence { layer, iterations: settings.max_iterations })?;
        log::debug!("layer {layer}: {iterations} iterations, {} distinct controls", records.len());
        layers.push(HjbLayer { t, u, index, records, iterations });
    }
    layers.reverse();
    let rate_start = model.coefficients_at(0.0).r_g[0];
    Ok(HjbSolution { grid: grid.clone(), rate: rate.clone(), nu: gov.nu, rate_start, layers })
}

