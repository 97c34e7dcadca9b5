use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DVector;

use super::solver::stencil;
use super::{Axis, HjbGrid, HjbLayer, HjbSolution, NodeControl, DIM, R};
use crate::error::{Error, Result};
use crate::mc::{PathBundle, RateDrift, RateModel};

/// Feedback holdings and portfolio along simulated paths.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackPaths {
    pub n_paths: usize,
    pub n_steps: usize,
    pub n_sources: usize,
    /// `[path][step][source]`.
    pub holdings: Vec<f64>,
    /// Portfolio value `[path][node]`.
    pub x: Vec<f64>,
    /// Number of (path, step) pairs whose state left the grid and was
    /// clamped onto it.
    pub clamped: usize,
}

impl FeedbackPaths {
    pub fn holding(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.n_steps + step) * self.n_sources;
        &self.holdings[o..o + self.n_sources]
    }
}

/// Runs the feedback policy along each path: at step `k` the state
/// `(X, W^g, r, W^I)` is read off the path and the holdings are interpolated
/// from the layer governing `t_k`.
pub fn extract_policy(sol: &HjbSolution, bundle: &PathBundle) -> Result<FeedbackPaths> {
    let n_t = sol.grid.n_t;
    if bundle.n_steps % n_t != 0 {
        return Err(Error::GridMismatch(format!(
            "{} simulation steps do not refine {} HJB time steps",
            bundle.n_steps, n_t
        )));
    }
    let rates = match (&bundle.rate, sol.grid.rate_frozen()) {
        (Some(r), _) => Some(r),
        (None, true) => None,
        (None, false) => {
            return Err(Error::InvalidParameter("bundle carries no green rate path for a stochastic-rate solution".into()))
        }
    };
    let ns = bundle.n_sources;
    let per = bundle.n_steps / n_t;
    let mut holdings = Vec::with_capacity(bundle.n_paths * bundle.n_steps * ns);
    let mut xs = Vec::with_capacity(bundle.n_paths * (bundle.n_steps + 1));
    let mut clamped = 0;
    for path in 0..bundle.n_paths {
        let (mut x, mut wg, mut wi) = (0.0, 0.0, 0.0);
        xs.push(x);
        for k in 0..bundle.n_steps {
            let r = rates.map_or(sol.grid.axes[R].lo, |r| r[path * (bundle.n_steps + 1) + k]);
            let b = [x, wg, r, wi];
            let (st, c) = stencil(&sol.grid, b);
            clamped += c as usize;
            let layer = &sol.layers[k / per];
            let mut p = DVector::zeros(ns);
            for &(node, w) in &st {
                p += DVector::from_row_slice(&layer.control(node).p) * w;
            }
            let ret = bundle.returns_at(path, k);
            x += p.iter().zip(ret).map(|(a, b)| a * b).sum::<f64>();
            let dw = bundle.dw_at(path, k);
            wg += dw[0];
            wi += dw[ns - 1];
            holdings.extend(p.iter());
            xs.push(x);
        }
    }
    Ok(FeedbackPaths { n_paths: bundle.n_paths, n_steps: bundle.n_steps, n_sources: ns, holdings, x: xs, clamped })
}

const MAGIC: &[u8; 4] = b"GCHJ";
const VERSION: u32 = 1;

/// Flat little-endian export: header with axes and the rate model, then per
/// layer the time, values, control table and node indices.
pub fn write_solution<W: Write>(sol: &HjbSolution, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_f64::<LittleEndian>(sol.grid.horizon)?;
    out.write_u64::<LittleEndian>(sol.grid.n_t as u64)?;
    for a in &sol.grid.axes {
        out.write_f64::<LittleEndian>(a.lo)?;
        out.write_f64::<LittleEndian>(a.hi)?;
        out.write_u64::<LittleEndian>(a.n as u64)?;
    }
    let (tag, theta, m) = match sol.rate.drift {
        RateDrift::Ou { theta, m } => (0u8, theta, m),
        RateDrift::CurveReverting { theta } => (1u8, theta, 0.0),
    };
    out.write_u8(tag)?;
    for v in [theta, m, sol.rate.sigma_r, sol.nu, sol.rate_start] {
        out.write_f64::<LittleEndian>(v)?;
    }
    let n_sources = sol.layers[0].records[0].p.len();
    out.write_u64::<LittleEndian>(n_sources as u64)?;
    out.write_u64::<LittleEndian>(sol.layers.len() as u64)?;
    for l in &sol.layers {
        out.write_f64::<LittleEndian>(l.t)?;
        out.write_u64::<LittleEndian>(l.iterations as u64)?;
        for &u in &l.u {
            out.write_f64::<LittleEndian>(u)?;
        }
        out.write_u64::<LittleEndian>(l.records.len() as u64)?;
        for r in &l.records {
            for v in r.theta.iter().chain(&r.z).chain(&r.p).chain(&r.mu).chain(&r.a).chain(std::iter::once(&r.script_h)) {
                out.write_f64::<LittleEndian>(*v)?;
            }
        }
        for &i in &l.index {
            out.write_u32::<LittleEndian>(i)?;
        }
    }
    Ok(())
}

pub fn read_solution<R: Read>(mut input: R) -> Result<HjbSolution> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse { line: 0, message: "not an HJB solution file".into() });
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Parse { line: 0, message: format!("unsupported HJB file version {version}") });
    }
    let horizon = input.read_f64::<LittleEndian>()?;
    let n_t = input.read_u64::<LittleEndian>()? as usize;
    let mut axes = [Axis::frozen(0.0); DIM];
    for a in axes.iter_mut() {
        let lo = input.read_f64::<LittleEndian>()?;
        let hi = input.read_f64::<LittleEndian>()?;
        let n = input.read_u64::<LittleEndian>()? as usize;
        *a = Axis::new(lo, hi, n);
    }
    let grid = HjbGrid { axes, n_t, horizon };
    grid.validate()?;
    let tag = input.read_u8()?;
    let mut f = [0.0; 5];
    for v in f.iter_mut() {
        *v = input.read_f64::<LittleEndian>()?;
    }
    let drift = match tag {
        0 => RateDrift::Ou { theta: f[0], m: f[1] },
        1 => RateDrift::CurveReverting { theta: f[0] },
        t => return Err(Error::Parse { line: 0, message: format!("unknown rate model tag {t}") }),
    };
    let n_sources = input.read_u64::<LittleEndian>()? as usize;
    let n_layers = input.read_u64::<LittleEndian>()? as usize;
    if n_layers != n_t + 1 {
        return Err(Error::Parse { line: 0, message: format!("{n_layers} layers for {n_t} time steps") });
    }
    let n = grid.n_nodes();
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let t = input.read_f64::<LittleEndian>()?;
        let iterations = input.read_u64::<LittleEndian>()? as usize;
        let mut u = vec![0.0; n];
        input.read_f64_into::<LittleEndian>(&mut u)?;
        let n_rec = input.read_u64::<LittleEndian>()? as usize;
        let mut records = Vec::with_capacity(n_rec);
        let width = 4 + DIM + n_sources + DIM + DIM * DIM + 1;
        let mut buf = vec![0.0; width];
        for _ in 0..n_rec {
            input.read_f64_into::<LittleEndian>(&mut buf)?;
            let mut it = buf.iter().copied();
            let mut take = |k: usize| it.by_ref().take(k).collect::<Vec<f64>>();
            let theta = take(4);
            let z = take(DIM);
            let p = take(n_sources);
            let mu = take(DIM);
            let a = take(DIM * DIM);
            let script_h = take(1)[0];
            records.push(NodeControl {
                theta: std::array::from_fn(|i| theta[i]),
                z: std::array::from_fn(|i| z[i]),
                p,
                mu: std::array::from_fn(|i| mu[i]),
                a: std::array::from_fn(|i| a[i]),
                script_h,
            });
        }
        let mut index = vec![0u32; n];
        input.read_u32_into::<LittleEndian>(&mut index)?;
        if index.iter().any(|&i| i as usize >= n_rec) {
            return Err(Error::Parse { line: 0, message: "control index out of range".into() });
        }
        layers.push(HjbLayer { t, u, index, records, iterations });
    }
    Ok(HjbSolution {
        grid,
        rate: RateModel { drift, sigma_r: f[2] },
        nu: f[3],
        rate_start: f[4],
        layers,
    })
}

/// Values and feedback on the `(X, r)` plane of one layer, with the Brownian
/// coordinates at the node nearest zero.
pub fn write_slice_csv<W: Write>(sol: &HjbSolution, layer: usize, provenance: &str, mut out: W) -> Result<()> {
    let l = sol.layers.get(layer).ok_or_else(|| {
        Error::InvalidParameter(format!("layer {layer} outside 0..={}", sol.layers.len() - 1))
    })?;
    let g = &sol.grid;
    let mid = |d: usize| {
        let a = &g.axes[d];
        if a.n == 1 {
            0
        } else {
            ((0.0 - a.lo) / a.h()).round().clamp(0.0, (a.n - 1) as f64) as usize
        }
    };
    let (ig, ii) = (mid(1), mid(3));
    let n_sources = l.records[0].p.len();
    let mut header = vec!["t".to_string(), "x".into(), "w_g".into(), "r".into(), "w_i".into(), "u".into(), "script_h".into()];
    header.extend(["z_x", "z_g", "z_r", "z_i", "g_xx", "g_xg", "g_xi"].map(String::from));
    header.extend((0..n_sources).map(|i| format!("p_{i}")));
    writeln!(out, "# {provenance}")?;
    writeln!(out, "{}", header.join(","))?;
    for ix in 0..g.axes[0].n {
        for ir in 0..g.axes[R].n {
            let k = g.index([ix, ig, ir, ii]);
            let c = l.control(k);
            let mut row = vec![l.t, g.axes[0].x(ix), g.axes[1].x(ig), g.axes[R].x(ir), g.axes[3].x(ii), l.u[k], c.script_h];
            row.extend(c.z);
            row.extend(&c.theta[1..]);
            row.extend(&c.p);
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
    }
    Ok(())
}
