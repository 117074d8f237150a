//! Post-processing rotation of (factor, scaled loading) draws.
//!
//! Raw draws from the outcome stage are only identified up to an invertible
//! r x r transform. Before the loadings enter the assignment probit they are
//! rotated so that `F'F/T = I` and `Γ'Γ/N` is diagonal with descending
//! entries, which leaves the common component `F Γ'` unchanged.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::sym_sqrt_pair;

/// A column is inactive when `|ω_j| < SHRINK_TOLERANCE * max_j |ω_j|`.
pub const SHRINK_TOLERANCE: f64 = 1e-6;

/// Relative pivot below which the active factor columns are treated as
/// collinear.
const RANK_TOLERANCE: f64 = 1e-10;

/// Relative eigenvalue gap reported as a tie.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct FactorBlock {
    /// N x r normalized loadings.
    pub loadings_raw: DMatrix<f64>,
    /// T x r factors.
    pub factors_raw: DMatrix<f64>,
    /// Loading scales (length r).
    pub scale: DVector<f64>,
}

impl FactorBlock {
    pub fn new(loadings_raw: DMatrix<f64>, factors_raw: DMatrix<f64>, scale: DVector<f64>) -> Result<Self> {
        let r = scale.len();
        if loadings_raw.ncols() != r || factors_raw.ncols() != r {
            return Err(Error::Schema(format!(
                "factor block widths {} / {} do not match {r} scales",
                loadings_raw.ncols(),
                factors_raw.ncols()
            )));
        }
        if scale.iter().any(|s| !s.is_finite()) {
            return Err(Error::Domain("non-finite loading scale".into()));
        }
        Ok(FactorBlock {
            loadings_raw,
            factors_raw,
            scale,
        })
    }

    pub fn n_factors(&self) -> usize {
        self.scale.len()
    }

    /// Indices of columns that survive the shrink tolerance.
    pub fn active_columns(&self) -> Vec<usize> {
        let max = self.scale.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if max == 0.0 {
            return Vec::new();
        }
        (0..self.n_factors())
            .filter(|&j| self.scale[j].abs() >= SHRINK_TOLERANCE * max)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RotatedFactors {
    /// N x r rotated loadings; inactive columns are zero.
    pub loadings: DMatrix<f64>,
    /// T x r rotated factors; inactive columns carry the raw factors.
    pub factors: DMatrix<f64>,
    pub active: Vec<bool>,
    /// Eigenvalues of M placed at the active columns (descending there).
    pub eigenvalues: Vec<f64>,
    /// Two eigenvalues of M coincided; order fell back to column index.
    pub tie: bool,
}

pub fn rotate_to_normalization(block: &FactorBlock) -> Result<RotatedFactors> {
    let n = block.loadings_raw.nrows();
    let t = block.factors_raw.nrows();
    let r = block.n_factors();
    let active = block.active_columns();
    let m = active.len();

    let mut loadings = DMatrix::<f64>::zeros(n, r);
    let mut factors = block.factors_raw.clone();
    let mut eigenvalues = vec![0.0; r];
    let mut active_mask = vec![false; r];
    for &j in &active {
        active_mask[j] = true;
    }
    if m == 0 {
        return Ok(RotatedFactors {
            loadings,
            factors,
            active: active_mask,
            eigenvalues,
            tie: false,
        });
    }
    if t < m {
        return Err(Error::Precondition(format!(
            "{t} periods cannot identify {m} active factors"
        )));
    }

    let f_tilde = DMatrix::from_fn(t, m, |s, k| block.factors_raw[(s, active[k])]);
    let g_hat = DMatrix::from_fn(n, m, |i, k| {
        block.loadings_raw[(i, active[k])] * block.scale[active[k]]
    });

    let s = f_tilde.tr_mul(&f_tilde) / t as f64;
    check_rank(&s, &active)?;
    let (s_half, s_inv_half) = sym_sqrt_pair(&s);
    let g = g_hat.tr_mul(&g_hat) / n as f64;
    let mut mm = &s_half * g * &s_half;
    mm = (&mm + mm.transpose()) * 0.5;

    let eig = nalgebra::SymmetricEigen::new(mm);
    let mut order: Vec<usize> = (0..m).collect();
    // stable sort: equal eigenvalues keep column order
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let scale_ev = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let tie = order
        .windows(2)
        .any(|w| (eig.eigenvalues[w[0]] - eig.eigenvalues[w[1]]).abs() <= TIE_TOLERANCE * scale_ev);
    let q = DMatrix::from_fn(m, m, |i, k| eig.eigenvectors[(i, order[k])]);

    let mut gamma = g_hat * s_half * &q;
    let mut f = f_tilde * s_inv_half * &q;
    for k in 0..m {
        let col = gamma.column(k);
        let mut pick = 0;
        for i in 1..n {
            if col[i].abs() > col[pick].abs() {
                pick = i;
            }
        }
        if col[pick] < 0.0 {
            gamma.column_mut(k).neg_mut();
            f.column_mut(k).neg_mut();
        }
    }

    for (k, &j) in active.iter().enumerate() {
        loadings.set_column(j, &gamma.column(k));
        factors.set_column(j, &f.column(k));
        eigenvalues[j] = eig.eigenvalues[order[k]];
    }
    Ok(RotatedFactors {
        loadings,
        factors,
        active: active_mask,
        eigenvalues,
        tie,
    })
}

/// Cholesky sweep over `S`; the first column whose pivot collapses relative
/// to its diagonal lies in the span of the earlier ones.
fn check_rank(s: &DMatrix<f64>, active: &[usize]) -> Result<()> {
    let m = s.nrows();
    let mut l = DMatrix::<f64>::zeros(m, m);
    for j in 0..m {
        let mut d = s[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > RANK_TOLERANCE * s[(j, j)]) || !d.is_finite() {
            return Err(Error::DegenerateFactor { column: active[j] });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..m {
            let mut v = s[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / d;
        }
    }
    Ok(())
}
