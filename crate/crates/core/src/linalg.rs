//! Small dense linear algebra helpers used by the conditional draws.
//!
//! The matrices in this crate are tiny (at most a few dozen rows), so a
//! plain lower-triangular Cholesky is all the sampler needs. It is written
//! out here rather than taken from nalgebra so that a failed factorization
//! can report the offending pivot.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower-triangular factor `L` with `A = L L'`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "cholesky of a non-square matrix");
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { index: j, pivot: d });
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves `L x = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut DVector<f64>) {
        let n = self.dim();
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    /// Solves `L' x = b` in place.
    pub fn solve_upper_in_place(&self, b: &mut DVector<f64>) {
        let n = self.dim();
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_lower_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        x
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut inv = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut e = DVector::<f64>::zeros(n);
            e[j] = 1.0;
            let col = self.solve(&e);
            inv.set_column(j, &col);
        }
        inv
    }
}

/// Symmetric square root and inverse square root of an SPD matrix via its
/// eigendecomposition.
pub(crate) fn sym_sqrt_pair(s: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let eig = nalgebra::SymmetricEigen::new(s.clone());
    let n = s.nrows();
    let q = &eig.eigenvectors;
    let mut half = DMatrix::<f64>::zeros(n, n);
    let mut inv_half = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        let v = eig.eigenvalues[k].max(0.0);
        let sq = v.sqrt();
        let col = q.column(k);
        for i in 0..n {
            for j in 0..n {
                let c = col[i] * col[j];
                half[(i, j)] += sq * c;
                inv_half[(i, j)] += c / sq;
            }
        }
    }
    (half, inv_half)
}
