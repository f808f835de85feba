//! Dense PSD linear algebra: symmetric eigendecomposition, square roots and
//! the Moore-Penrose pseudo-inverse.

use faer::{Mat, Side};

use crate::error::{OpeError, Result};
use crate::kernel::GramMatrix;

/// Default relative truncation for [`pinv`].
pub const PINV_REL_TOL: f64 = 1e-10;

/// Relative PSD tolerance: eigenvalues down to `-PSD_REL_TOL * max|diag|` are clamped to zero.
pub const PSD_REL_TOL: f64 = 1e-8;

/// Eigenpairs of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Mat<f64>,
}

pub fn sym_eigen(m: &Mat<f64>) -> Result<SymEigen> {
    check_finite(m)?;
    let n = m.nrows();
    if n != m.ncols() {
        return Err(OpeError::invalid("eigendecomposition needs a square matrix"));
    }
    // symmetrize so both triangles agree
    let sym = Mat::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let evd = sym
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| OpeError::NumericalFailure(format!("eigendecomposition failed: {e:?}")))?;
    let values: Vec<f64> = (0..n).map(|i| evd.S()[i]).collect();
    Ok(SymEigen {
        values,
        vectors: evd.U().to_owned(),
    })
}

impl SymEigen {
    /// `V diag(f(lambda)) V^T`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Mat<f64> {
        let n = self.values.len();
        let scaled = Mat::from_fn(n, n, |i, j| self.vectors[(i, j)] * f(self.values[j]));
        &scaled * self.vectors.transpose()
    }
}

pub(crate) fn check_finite(m: &Mat<f64>) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(OpeError::invalid(format!("non-finite entry at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

pub fn max_abs(m: &Mat<f64>) -> f64 {
    let mut best = 0.0f64;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            best = best.max(m[(i, j)].abs());
        }
    }
    best
}

fn max_abs_diag(m: &Mat<f64>) -> f64 {
    (0..m.nrows().min(m.ncols()))
        .map(|i| m[(i, i)].abs())
        .fold(0.0, f64::max)
}

/// Eigendecomposition of a PSD matrix with small negative eigenvalues clamped to zero.
pub fn psd_eigen(m: &Mat<f64>) -> Result<SymEigen> {
    let mut e = sym_eigen(m)?;
    let tol = PSD_REL_TOL * max_abs_diag(m);
    let min = e.values.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -tol {
        return Err(OpeError::NotPsd {
            min_eigenvalue: min,
            tolerance: tol,
        });
    }
    for v in &mut e.values {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(e)
}

/// Symmetric square root of a PSD Gram matrix.
pub fn psd_sqrt(g: &GramMatrix) -> Result<Mat<f64>> {
    psd_sqrt_matrix(g.matrix())
}

pub fn psd_sqrt_matrix(m: &Mat<f64>) -> Result<Mat<f64>> {
    let e = psd_eigen(m)?;
    let s = e.reconstruct_with(f64::sqrt);
    let n = s.nrows();
    Ok(Mat::from_fn(n, n, |i, j| 0.5 * (s[(i, j)] + s[(j, i)])))
}

/// Moore-Penrose pseudo-inverse via SVD. Singular values at or below
/// `rel_tol * sigma_max` are treated as zero.
pub fn pinv(m: &Mat<f64>, rel_tol: f64) -> Result<Mat<f64>> {
    check_finite(m)?;
    if !(rel_tol.is_finite() && rel_tol >= 0.0) {
        return Err(OpeError::invalid(format!("invalid pinv tolerance {rel_tol}")));
    }
    let (r, c) = (m.nrows(), m.ncols());
    if r == 0 || c == 0 {
        return Ok(Mat::zeros(c, r));
    }
    let svd = m
        .thin_svd()
        .map_err(|e| OpeError::NumericalFailure(format!("SVD failed: {e:?}")))?;
    let k = r.min(c);
    let s: Vec<f64> = (0..k).map(|i| svd.S()[i]).collect();
    let smax = s.iter().copied().fold(0.0, f64::max);
    let cut = rel_tol * smax;
    let u = svd.U();
    let v = svd.V();
    // V diag(1/s) U^T restricted to retained singular values
    let vs = Mat::from_fn(c, k, |i, j| {
        if s[j] > cut && s[j] > 0.0 {
            v[(i, j)] / s[j]
        } else {
            0.0
        }
    });
    Ok(&vs * u.transpose())
}

/// Singular values in descending order.
pub fn singular_values(m: &Mat<f64>) -> Result<Vec<f64>> {
    check_finite(m)?;
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(Vec::new());
    }
    let mut s = m
        .singular_values()
        .map_err(|e| OpeError::NumericalFailure(format!("SVD failed: {e:?}")))?;
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Numerical rank: number of singular values above `rel_tol * sigma_max`.
pub fn rank(m: &Mat<f64>, rel_tol: f64) -> Result<usize> {
    let s = singular_values(m)?;
    let Some(&smax) = s.first() else {
        return Ok(0);
    };
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&v| v > rel_tol * smax).count())
}
