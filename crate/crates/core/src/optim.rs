//! Projected quasi-Newton minimization over a box.
//!
//! Each iteration fixes the coordinates sitting on a bound with the gradient
//! pushing outward, takes a (quasi-)Newton step in the remaining coordinates,
//! projects it back onto the box and backtracks until the Armijo condition
//! holds along the projected path. The curvature model is either a supplied
//! constant Hessian (projected Newton) or a BFGS approximation.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug)]
pub struct BoxOptions {
    pub max_iter: usize,
    /// Stop when the projected gradient's infinity norm falls below this.
    pub grad_tol: f64,
    /// Stop when a step changes the objective by less than `f_tol (1 + |f|)`
    /// and moves every coordinate by less than `x_tol`.
    pub f_tol: f64,
    pub x_tol: f64,
    /// Constant Hessian to use instead of BFGS.
    pub hessian: Option<DMatrix<f64>>,
}

impl Default for BoxOptions {
    fn default() -> Self {
        BoxOptions { max_iter: 200, grad_tol: 1e-9, f_tol: 1e-14, x_tol: 1e-12, hessian: None }
    }
}

#[derive(Clone, Debug)]
pub struct BoxResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub grad: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn project(x: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| x[i].max(lo[i]).min(hi[i]))
}

fn binding(x: f64, g: f64, lo: f64, hi: f64) -> bool {
    let tol = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
    (x <= lo + tol && g > 0.0) || (x >= hi - tol && g < 0.0)
}

/// Projected gradient: zero on binding coordinates.
pub fn projected_gradient(x: &DVector<f64>, g: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| if binding(x[i], g[i], lo[i], hi[i]) { 0.0 } else { g[i] })
}

pub fn minimize_box<F>(mut fg: F, x0: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>, opts: &BoxOptions) -> BoxResult
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    let mut x = project(x0, lo, hi);
    let (mut f, mut g) = fg(&x);
    let mut b = opts.hessian.clone().unwrap_or_else(|| DMatrix::identity(n, n));
    let quasi = opts.hessian.is_none();
    let mut first_update = true;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let pg = projected_gradient(&x, &g, lo, hi);
        if pg.amax() <= opts.grad_tol {
            converged = true;
            break;
        }
        let free: Vec<usize> = (0..n).filter(|&i| !binding(x[i], g[i], lo[i], hi[i])).collect();
        let mut d = newton_direction(&b, &g, &free, n).unwrap_or_else(|| -&pg);
        if g.dot(&d) >= 0.0 {
            d = -&pg;
        }

        let step = line_search(&mut fg, &x, f, &g, &d, lo, hi).or_else(|| {
            if d != -&pg {
                line_search(&mut fg, &x, f, &g, &(-&pg), lo, hi)
            } else {
                None
            }
        });
        let Some((x_new, f_new, g_new)) = step else {
            converged = pg.amax() <= opts.grad_tol.sqrt();
            break;
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let small_change = (f - f_new).abs() <= opts.f_tol * (1.0 + f.abs()) && s.amax() <= opts.x_tol;
        if quasi {
            let sy = s.dot(&y);
            if sy > 1e-12 * s.norm() * y.norm() {
                if first_update {
                    b = DMatrix::identity(n, n) * (y.dot(&y) / sy);
                    first_update = false;
                }
                let bs = &b * &s;
                let sbs = s.dot(&bs);
                if sbs > 0.0 {
                    b -= &bs * bs.transpose() / sbs;
                    b += &y * y.transpose() / sy;
                }
            }
        }
        x = x_new;
        f = f_new;
        g = g_new;
        if small_change {
            converged = true;
            break;
        }
    }
    BoxResult { x, f, grad: g, iterations, converged }
}

fn newton_direction(b: &DMatrix<f64>, g: &DVector<f64>, free: &[usize], n: usize) -> Option<DVector<f64>> {
    if free.is_empty() {
        return None;
    }
    let bf = DMatrix::from_fn(free.len(), free.len(), |i, j| b[(free[i], free[j])]);
    let gf = DVector::from_fn(free.len(), |i, _| g[free[i]]);
    let sol = bf.cholesky()?.solve(&gf);
    let mut d = DVector::zeros(n);
    for (k, &i) in free.iter().enumerate() {
        d[i] = -sol[k];
    }
    Some(d)
}

type Step = (DVector<f64>, f64, DVector<f64>);

fn line_search<F>(
    fg: &mut F,
    x: &DVector<f64>,
    f: f64,
    g: &DVector<f64>,
    d: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> Option<Step>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let mut alpha = 1.0;
    for _ in 0..60 {
        let trial = project(&(x + d * alpha), lo, hi);
        let s = &trial - x;
        if s.amax() == 0.0 {
            return None;
        }
        let (ft, gt) = fg(&trial);
        if ft.is_finite() && ft <= f + 1e-4 * g.dot(&s) {
            return Some((trial, ft, gt));
        }
        alpha *= 0.5;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad<'a>(a: &'a DMatrix<f64>, c: &'a DVector<f64>) -> impl FnMut(&DVector<f64>) -> (f64, DVector<f64>) + 'a {
        move |x: &DVector<f64>| {
            let ax = a * x;
            (0.5 * x.dot(&ax) - c.dot(x), ax - c)
        }
    }

    #[test]
    fn interior_minimum_found() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let c = DVector::from_vec(vec![1.0, 1.0]);
        let lo = DVector::from_element(2, -10.0);
        let hi = DVector::from_element(2, 10.0);
        let r = minimize_box(quad(&a, &c), &DVector::zeros(2), &lo, &hi, &BoxOptions::default());
        let exact = a.clone().lu().solve(&c).unwrap();
        assert!(r.converged);
        assert!((r.x - exact).amax() < 1e-7);
    }

    #[test]
    fn bound_active_minimum() {
        let a = DMatrix::identity(2, 2);
        let c = DVector::from_vec(vec![5.0, -5.0]);
        let lo = DVector::from_element(2, -1.0);
        let hi = DVector::from_element(2, 1.0);
        for hess in [None, Some(a.clone())] {
            let opts = BoxOptions { hessian: hess, ..Default::default() };
            let r = minimize_box(quad(&a, &c), &DVector::zeros(2), &lo, &hi, &opts);
            assert!((r.x[0] - 1.0).abs() < 1e-12 && (r.x[1] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rosenbrock_in_box() {
        let f = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
            (v, g)
        };
        let lo = DVector::from_element(2, -2.0);
        let hi = DVector::from_element(2, 0.5);
        let opts = BoxOptions { max_iter: 2000, ..Default::default() };
        let r = minimize_box(f, &DVector::from_vec(vec![-1.5, 2.0]), &lo, &hi, &opts);
        // Constrained optimum sits on a = 0.5 with b = a².
        assert!((r.x[0] - 0.5).abs() < 1e-6 && (r.x[1] - 0.25).abs() < 1e-6);
    }
}
