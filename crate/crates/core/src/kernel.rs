//! Gaussian kernels, Gram matrices and the median-heuristic bandwidth.
//!
//! The kernel convention is `k(x, y) = exp(-|x - y|^2 / (2 sigma^2))`, so `k(x, x) = 1`
//! and the bandwidth `sigma` carries the units of the input coordinates.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};

/// Kernel families understood by [`KernelSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(OpeError::invalid(format!(
                "kernel bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        Ok(KernelSpec {
            family: KernelFamily::Gaussian,
            bandwidth,
        })
    }

    /// Kernel value from a squared distance.
    #[inline]
    pub fn from_sq_dist(&self, sq: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian => (-sq / (2.0 * self.bandwidth * self.bandwidth)).exp(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(OpeError::invalid(format!(
                "kernel bandwidth must be positive and finite, got {}",
                self.bandwidth
            )));
        }
        Ok(())
    }
}

/// Dense row-major feature matrix; each row is one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(OpeError::invalid("feature dimension must be at least 1"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(OpeError::invalid(format!(
                "feature buffer of length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        Ok(FeatureMatrix { dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| OpeError::invalid("empty point list"))?;
        let dim = first.as_ref().len();
        let mut data = Vec::with_capacity(dim * rows.len());
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(OpeError::invalid(format!(
                    "row {i} has dimension {}, expected {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        FeatureMatrix::new(dim, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, idx: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            dim: self.dim,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    spec.validate()?;
    if x.len() != y.len() {
        return Err(OpeError::invalid(format!(
            "dimension mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    Ok(spec.from_sq_dist(sq_dist(x, y)))
}

/// Symmetric kernel matrix over a point set.
#[derive(Debug, Clone)]
pub struct GramMatrix(Mat<f64>);

impl GramMatrix {
    /// Wrap an existing symmetric matrix (used for instrument Grams of a subset).
    pub fn from_matrix(m: Mat<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(OpeError::invalid("Gram matrix must be square"));
        }
        Ok(GramMatrix(m))
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &Mat<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> Mat<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// Principal submatrix on `idx`.
    pub fn submatrix(&self, idx: &[usize]) -> GramMatrix {
        GramMatrix(Mat::from_fn(idx.len(), idx.len(), |i, j| {
            self.0[(idx[i], idx[j])]
        }))
    }
}

pub fn gram(points: &FeatureMatrix, spec: &KernelSpec) -> Result<GramMatrix> {
    spec.validate()?;
    let n = points.rows();
    if n == 0 {
        return Err(OpeError::invalid("empty point list"));
    }
    let mut g = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        g[(j, j)] = 1.0;
        let yj = points.row(j);
        for i in (j + 1)..n {
            let v = spec.from_sq_dist(sq_dist(points.row(i), yj));
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(GramMatrix(g))
}

/// Rectangular kernel matrix `K[i][j] = k(rows[i], cols[j])`.
pub fn cross_gram(rows: &FeatureMatrix, cols: &FeatureMatrix, spec: &KernelSpec) -> Result<Mat<f64>> {
    spec.validate()?;
    if rows.dim() != cols.dim() {
        return Err(OpeError::invalid(format!(
            "dimension mismatch: {} vs {}",
            rows.dim(),
            cols.dim()
        )));
    }
    Ok(Mat::from_fn(rows.rows(), cols.rows(), |i, j| {
        spec.from_sq_dist(sq_dist(rows.row(i), cols.row(j)))
    }))
}

/// Median of all pairwise Euclidean distances over distinct index pairs.
pub fn median_heuristic(points: &FeatureMatrix) -> Result<f64> {
    let n = points.rows();
    if n < 2 {
        return Err(OpeError::invalid(format!(
            "median heuristic needs at least 2 points, got {n}"
        )));
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d.push(sq_dist(points.row(i), points.row(j)).sqrt());
        }
    }
    if !d.iter().all(|v| v.is_finite()) {
        return Err(OpeError::invalid("non-finite point coordinates"));
    }
    if d.iter().all(|&v| v == 0.0) {
        return Err(OpeError::degenerate("all pairwise distances are zero"));
    }
    let m = d.len();
    let upper = {
        let (_, v, _) = d.select_nth_unstable_by(m / 2, f64::total_cmp);
        *v
    };
    let med = if m % 2 == 1 {
        upper
    } else {
        // lower middle is the max of the left partition
        let lower = d[..m / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    if med <= 0.0 {
        // more than half the pairs coincide; fall back to the median of nonzero distances
        let mut nz: Vec<f64> = d.into_iter().filter(|&v| v > 0.0).collect();
        let k = nz.len() / 2;
        let (_, v, _) = nz.select_nth_unstable_by(k, f64::total_cmp);
        return Ok(*v);
    }
    Ok(med)
}
