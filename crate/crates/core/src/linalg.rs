//! Small dense helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symmetric matrix stored as its upper triangle, row by row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    n: usize,
    upper: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        SymMatrix { n, upper: vec![0.0; n * (n + 1) / 2] }
    }

    pub fn from_upper(n: usize, upper: Vec<f64>) -> Result<Self> {
        if upper.len() != n * (n + 1) / 2 {
            return Err(Error::Dimension(format!(
                "upper triangle of a {n}x{n} matrix needs {} entries, got {}",
                n * (n + 1) / 2,
                upper.len()
            )));
        }
        Ok(SymMatrix { n, upper })
    }

    /// Symmetrizes `m` as (m + mᵀ)/2.
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let mut s = SymMatrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                s.set(i, j, 0.5 * (m[(i, j)] + m[(j, i)]));
            }
        }
        s
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn upper_mut(&mut self) -> &mut [f64] {
        &mut self.upper
    }

    /// Position of entry (i, j), i ≤ j, in the packed upper triangle.
    pub fn packed_index(n: usize, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        i * n - i * (i + 1) / 2 + j
    }

    /// Inverse of [`SymMatrix::packed_index`].
    pub fn unpack_index(n: usize, k: usize) -> (usize, usize) {
        let mut row = 0;
        let mut start = 0;
        while k >= start + (n - row) {
            start += n - row;
            row += 1;
        }
        (row, row + (k - start))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.upper[Self::packed_index(self.n, i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = Self::packed_index(self.n, i, j);
        self.upper[k] = v;
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    pub fn scale(&self, c: f64) -> SymMatrix {
        SymMatrix { n: self.n, upper: self.upper.iter().map(|v| v * c).collect() }
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix {
            n: self.n,
            upper: self.upper.iter().zip(&other.upper).map(|(a, b)| a + b).collect(),
        }
    }

    /// Tr[self · m] for a symmetric `m`.
    pub fn trace_product(&self, m: &DMatrix<f64>) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            acc += self.get(i, i) * m[(i, i)];
            for j in (i + 1)..self.n {
                acc += self.get(i, j) * (m[(i, j)] + m[(j, i)]);
            }
        }
        acc
    }
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m).first().copied().unwrap_or(0.0)
}

/// Symmetric square root `L = V diag(√λ) Vᵀ` with `L Lᵀ = m`.
///
/// Eigenvalues in `[-tol, 0)` are clipped to zero; anything more negative is rejected.
pub fn psd_sqrt(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let lmin = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if lmin < -tol {
        return Err(Error::NotPsd { min_eigenvalue: lmin });
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Solves `a x = b` for symmetric positive definite `a`; `None` if not PD.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().cholesky().map(|c| c.solve(b))
}

pub fn is_positive_definite(a: &DMatrix<f64>) -> bool {
    a.nrows() == 0 || a.clone().cholesky().is_some()
}

/// Deterministic pairwise (tree) summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
