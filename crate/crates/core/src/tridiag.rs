//! Tridiagonal matrices and a pivoted LU factorization.
//!
//! Every operator assembled on a 1D P1 mesh couples only neighbouring nodes,
//! so the whole solver works with three diagonals. The factorization follows
//! the LAPACK `gttrf`/`gtts2` scheme (partial pivoting with one extra
//! super-diagonal of fill) so that the non-symmetric Jacobians of the
//! quasilinear problem are handled as robustly as the SPD mass systems.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square tridiagonal matrix. `sub[i] = A[i+1][i]`, `sup[i] = A[i][i+1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriMatrix {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
}

impl TriMatrix {
    pub fn zeros(n: usize) -> Self {
        let off = n.saturating_sub(1);
        Self {
            sub: vec![0.0; off],
            diag: vec![0.0; n],
            sup: vec![0.0; off],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        m.diag.iter_mut().for_each(|d| *d = 1.0);
        m
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// Entry `(i, j)`; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.diag[i]
        } else if j == i + 1 {
            self.sup[i]
        } else if i == j + 1 {
            self.sub[j]
        } else {
            0.0
        }
    }

    /// Adds a 2x2 element block coupling nodes `i` and `i + 1`.
    pub fn add_block(&mut self, i: usize, block: [[f64; 2]; 2]) {
        self.diag[i] += block[0][0];
        self.sup[i] += block[0][1];
        self.sub[i] += block[1][0];
        self.diag[i + 1] += block[1][1];
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        debug_assert_eq!(x.len(), n);
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = self.diag[i] * x[i];
            if i > 0 {
                acc += self.sub[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                acc += self.sup[i] * x[i + 1];
            }
            y[i] = acc;
        }
        y
    }

    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        self.transpose().matvec(x)
    }

    pub fn transpose(&self) -> Self {
        Self {
            sub: self.sup.clone(),
            diag: self.diag.clone(),
            sup: self.sub.clone(),
        }
    }

    /// `self + factor * other`.
    pub fn axpy(&self, factor: f64, other: &TriMatrix) -> Self {
        let zip = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + factor * y).collect() };
        Self {
            sub: zip(&self.sub, &other.sub),
            diag: zip(&self.diag, &other.diag),
            sup: zip(&self.sup, &other.sup),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let s = |v: &[f64]| v.iter().map(|x| x * factor).collect();
        Self {
            sub: s(&self.sub),
            diag: s(&self.diag),
            sup: s(&self.sup),
        }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.sub
            .iter()
            .zip(&self.sup)
            .all(|(a, b)| (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0))
    }

    /// Replaces the rows and columns of constrained nodes by the identity.
    pub fn constrain(&mut self, fixed: &[bool]) {
        let n = self.dim();
        for (i, _) in fixed.iter().enumerate().filter(|(_, f)| **f) {
            self.diag[i] = 1.0;
            if i > 0 {
                self.sub[i - 1] = 0.0;
                self.sup[i - 1] = 0.0;
            }
            if i + 1 < n {
                self.sup[i] = 0.0;
                self.sub[i] = 0.0;
            }
        }
    }

    pub fn factor(&self) -> Result<TriLu> {
        TriLu::new(self)
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.factor()?.solve(rhs))
    }
}

/// LU factors of a [`TriMatrix`] with partial pivoting.
#[derive(Debug, Clone)]
pub struct TriLu {
    dl: Vec<f64>,
    d: Vec<f64>,
    du: Vec<f64>,
    du2: Vec<f64>,
    swapped: Vec<bool>,
}

impl TriLu {
    pub fn new(a: &TriMatrix) -> Result<Self> {
        let n = a.dim();
        if n == 0 {
            return Err(Error::ShapeMismatch("empty tridiagonal system".into()));
        }
        let mut dl = a.sub.clone();
        let mut d = a.diag.clone();
        let mut du = a.sup.clone();
        let mut du2 = vec![0.0; n.saturating_sub(2)];
        let mut swapped = vec![false; n.saturating_sub(1)];

        for i in 0..n.saturating_sub(1) {
            if d[i].abs() >= dl[i].abs() {
                if d[i] != 0.0 {
                    let fact = dl[i] / d[i];
                    dl[i] = fact;
                    d[i + 1] -= fact * du[i];
                }
            } else {
                let fact = d[i] / dl[i];
                d[i] = dl[i];
                dl[i] = fact;
                let temp = du[i];
                du[i] = d[i + 1];
                d[i + 1] = temp - fact * d[i + 1];
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] *= -fact;
                }
                swapped[i] = true;
            }
        }
        if let Some(row) = d.iter().position(|v| *v == 0.0 || !v.is_finite()) {
            return Err(Error::Singular { row });
        }
        Ok(Self {
            dl,
            d,
            du,
            du2,
            swapped,
        })
    }

    pub fn dim(&self) -> usize {
        self.d.len()
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(rhs.len(), n, "rhs length");
        let mut b = rhs.to_vec();
        for i in 0..n.saturating_sub(1) {
            if !self.swapped[i] {
                b[i + 1] -= self.dl[i] * b[i];
            } else {
                let temp = b[i];
                b[i] = b[i + 1];
                b[i + 1] = temp - self.dl[i] * b[i];
            }
        }
        b[n - 1] /= self.d[n - 1];
        if n > 1 {
            b[n - 2] = (b[n - 2] - self.du[n - 2] * b[n - 1]) / self.d[n - 2];
        }
        for i in (0..n.saturating_sub(2)).rev() {
            b[i] = (b[i] - self.du[i] * b[i + 1] - self.du2[i] * b[i + 2]) / self.d[i];
        }
        b
    }

    /// Solves `A^T x = rhs` with the same factors.
    pub fn solve_transpose(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(rhs.len(), n, "rhs length");
        let mut b = rhs.to_vec();
        b[0] /= self.d[0];
        if n > 1 {
            b[1] = (b[1] - self.du[0] * b[0]) / self.d[1];
        }
        for i in 2..n {
            b[i] = (b[i] - self.du[i - 1] * b[i - 1] - self.du2[i - 2] * b[i - 2]) / self.d[i];
        }
        for i in (0..n.saturating_sub(1)).rev() {
            if !self.swapped[i] {
                b[i] -= self.dl[i] * b[i + 1];
            } else {
                let temp = b[i + 1];
                b[i + 1] = b[i] - self.dl[i] * temp;
                b[i] = temp;
            }
        }
        b
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
