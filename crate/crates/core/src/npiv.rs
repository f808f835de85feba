//! One-step kernel min-max NPIV estimation.
//!
//! For hypothesis Gram `K_H`, instrument Gram `K_F` and response `Y`, the
//! estimator is the representer expansion `h(x) = sum_i alpha_i k_H(x_i, x)` with
//!
//! ```text
//! alpha = (K_H M K_H + 4 lambda2_mu K_H)^+ K_H M Y
//! M     = K_F^{1/2} (ratio / n K_F + I)^{-1} K_F^{1/2}
//! ```
//!
//! [`fit_npiv`] evaluates this through the eigenbasis of `K_H`, which makes
//! re-solving for many regularization levels cost `O(n r)` each. The literal
//! pseudo-inverse form is kept as [`fit_npiv_pinv`].

use faer::Mat;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};
use crate::kernel::{gram, FeatureMatrix, GramMatrix, KernelSpec};
use crate::linalg::{psd_eigen, pinv, SymEigen, PINV_REL_TOL};

/// Eigenvalues of `K_H` below this fraction of the largest are dropped.
const HYPOTHESIS_REL_TOL: f64 = PINV_REL_TOL;

/// `5 / n^0.4`.
pub fn scaling_varsigma(n: usize) -> Result<f64> {
    if n == 0 {
        return Err(OpeError::invalid("sample size must be at least 1"));
    }
    Ok(5.0 / (n as f64).powf(0.4))
}

/// `scale * varsigma(n)^4 / 2`.
pub fn scaling_zeta(scale: f64, n: usize) -> Result<f64> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(OpeError::invalid(format!("scale must be positive, got {scale}")));
    }
    Ok(scale * scaling_varsigma(n)?.powi(4) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// `M / delta^2`.
    pub ratio_m_delta2: f64,
    /// `lambda^2 mu`.
    pub lambda2_mu: f64,
    pub scale: f64,
}

impl HyperParams {
    pub fn new(ratio_m_delta2: f64, lambda2_mu: f64, scale: f64) -> Result<Self> {
        let hp = HyperParams {
            ratio_m_delta2,
            lambda2_mu,
            scale,
        };
        hp.validate()?;
        Ok(hp)
    }

    /// Defaults tied to the sample size: `ratio = 1/varsigma(n)^2`, `lambda2_mu = zeta(scale, n)`.
    pub fn for_sample_size(scale: f64, n: usize) -> Result<Self> {
        let vs = scaling_varsigma(n)?;
        HyperParams::new(1.0 / (vs * vs), scaling_zeta(scale, n)?, scale)
    }

    fn validate(&self) -> Result<()> {
        if !(self.ratio_m_delta2.is_finite() && self.ratio_m_delta2 > 0.0) {
            return Err(OpeError::invalid("ratio_m_delta2 must be positive"));
        }
        if !(self.lambda2_mu.is_finite() && self.lambda2_mu >= 0.0) {
            return Err(OpeError::invalid("lambda2_mu must be nonnegative"));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(OpeError::invalid("scale must be positive"));
        }
        Ok(())
    }
}

/// Training data for one NPIV solve.
#[derive(Debug, Clone)]
pub struct NpivProblem {
    pub hypothesis_features: FeatureMatrix,
    pub instrument_features: FeatureMatrix,
    pub response: Vec<f64>,
    pub kernel_h: KernelSpec,
    pub kernel_f: KernelSpec,
}

impl NpivProblem {
    pub fn new(
        hypothesis_features: FeatureMatrix,
        instrument_features: FeatureMatrix,
        response: Vec<f64>,
        kernel_h: KernelSpec,
        kernel_f: KernelSpec,
    ) -> Result<Self> {
        let p = NpivProblem {
            hypothesis_features,
            instrument_features,
            response,
            kernel_h,
            kernel_f,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.response.len();
        if self.hypothesis_features.rows() != n || self.instrument_features.rows() != n {
            return Err(OpeError::invalid(format!(
                "row counts differ: hypothesis {}, instrument {}, response {n}",
                self.hypothesis_features.rows(),
                self.instrument_features.rows()
            )));
        }
        if n < 2 {
            return Err(OpeError::invalid(format!("NPIV needs n >= 2, got {n}")));
        }
        if !self.response.iter().all(|y| y.is_finite()) {
            return Err(OpeError::invalid("non-finite response"));
        }
        if !self.hypothesis_features.is_finite() || !self.instrument_features.is_finite() {
            return Err(OpeError::invalid("non-finite features"));
        }
        Ok(())
    }
}

/// Fitted representer expansion.
#[derive(Debug, Clone)]
pub struct NpivModel {
    pub alpha: Vec<f64>,
    pub anchors: FeatureMatrix,
    pub kernel_h: KernelSpec,
}

impl NpivModel {
    pub fn predict(&self, query: &FeatureMatrix) -> Result<Vec<f64>> {
        predict(self, query)
    }
}

pub fn predict(model: &NpivModel, query: &FeatureMatrix) -> Result<Vec<f64>> {
    if query.dim() != model.anchors.dim() {
        return Err(OpeError::invalid(format!(
            "query dimension {} does not match anchors {}",
            query.dim(),
            model.anchors.dim()
        )));
    }
    let k = &model.kernel_h;
    Ok((0..query.rows())
        .map(|i| {
            let q = query.row(i);
            model
                .alpha
                .iter()
                .enumerate()
                .map(|(j, a)| {
                    let x = model.anchors.row(j);
                    let sq: f64 = q.iter().zip(x).map(|(u, v)| (u - v) * (u - v)).sum();
                    a * k.from_sq_dist(sq)
                })
                .sum()
        })
        .collect())
}

/// Eigen-factored instrument weighting `M = K^{1/2} (c K + I)^{-1} K^{1/2}` with `c = ratio / n`.
#[derive(Debug, Clone)]
struct InstrumentWeights {
    eig: SymEigen,
    /// eigenvalues of M
    weights: Vec<f64>,
}

impl InstrumentWeights {
    fn new(k_f: &Mat<f64>, ratio_m_delta2: f64) -> Result<Self> {
        let n = k_f.nrows();
        let c = ratio_m_delta2 / n as f64;
        let eig = psd_eigen(k_f)?;
        let weights = eig.values.iter().map(|&l| l / (c * l + 1.0)).collect();
        Ok(InstrumentWeights { eig, weights })
    }

    fn matrix(&self) -> Mat<f64> {
        let n = self.weights.len();
        let u = &self.eig.vectors;
        let scaled = Mat::from_fn(n, n, |i, j| u[(i, j)] * self.weights[j]);
        &scaled * u.transpose()
    }

    /// `M x` without forming `M`.
    fn apply(&self, x: &Mat<f64>) -> Mat<f64> {
        let u = &self.eig.vectors;
        let mut ux = u.transpose() * x;
        for (i, w) in self.weights.iter().enumerate() {
            for j in 0..ux.ncols() {
                ux[(i, j)] *= w;
            }
        }
        u * &ux
    }

    /// `e^T M e`, clamped at zero.
    fn quad_form(&self, e: &[f64]) -> f64 {
        let u = &self.eig.vectors;
        let mut total = 0.0;
        for (j, w) in self.weights.iter().enumerate() {
            let proj: f64 = e.iter().enumerate().map(|(i, v)| u[(i, j)] * v).sum();
            total += w * proj * proj;
        }
        total.max(0.0)
    }
}

/// `K_F^{1/2} (ratio / n K_F + I)^{-1} K_F^{1/2}` for an `n x n` instrument Gram.
pub fn instrument_weight_matrix(k_f: &GramMatrix, ratio_m_delta2: f64) -> Result<Mat<f64>> {
    if !(ratio_m_delta2.is_finite() && ratio_m_delta2 > 0.0) {
        return Err(OpeError::invalid("ratio_m_delta2 must be positive"));
    }
    Ok(InstrumentWeights::new(k_f.matrix(), ratio_m_delta2)?.matrix())
}

/// `e^T M e` with `M` built from the instrument Gram of the same rows.
pub fn projected_loss(residuals: &[f64], instrument_gram: &GramMatrix, ratio_m_delta2: f64) -> Result<f64> {
    if residuals.len() != instrument_gram.size() {
        return Err(OpeError::invalid(format!(
            "residual length {} does not match Gram size {}",
            residuals.len(),
            instrument_gram.size()
        )));
    }
    if !(ratio_m_delta2.is_finite() && ratio_m_delta2 > 0.0) {
        return Err(OpeError::invalid("ratio_m_delta2 must be positive"));
    }
    if residuals.iter().all(|&e| e == 0.0) {
        return Ok(0.0);
    }
    Ok(InstrumentWeights::new(instrument_gram.matrix(), ratio_m_delta2)?.quad_form(residuals))
}

/// The closed form reduced to the retained eigenbasis of `K_H = V D V^T`.
///
/// With `P = V D^{1/2}`, `B = P^T M P = Q diag(gamma) Q^T` and `c = 4 lambda2_mu > 0`:
/// `alpha = V D^{-1/2} Q diag(1 / (gamma + c)) Q^T P^T M Y`.
struct SpectralSystem {
    /// `V D^{-1/2} Q`, n x r
    basis: Mat<f64>,
    gamma: Vec<f64>,
    /// `Q^T P^T M Y`
    rhs: Vec<f64>,
}

impl SpectralSystem {
    fn new(k_h: &Mat<f64>, m: &InstrumentWeights, y: &[f64]) -> Result<Self> {
        let n = k_h.nrows();
        let eh = psd_eigen(k_h)?;
        let dmax = eh.values.iter().copied().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..n)
            .filter(|&j| eh.values[j] > HYPOTHESIS_REL_TOL * dmax && eh.values[j] > 0.0)
            .collect();
        let r = keep.len();
        let p = Mat::from_fn(n, r, |i, j| eh.vectors[(i, keep[j])] * eh.values[keep[j]].sqrt());
        let mp = m.apply(&p);
        let b = p.transpose() * &mp;
        let eb = psd_eigen(&b)?;
        // P^T M Y = (M P)^T Y
        let pmy: Vec<f64> = (0..r)
            .map(|j| (0..n).map(|i| mp[(i, j)] * y[i]).sum())
            .collect();
        let rhs: Vec<f64> = (0..r)
            .map(|k| (0..r).map(|j| eb.vectors[(j, k)] * pmy[j]).sum())
            .collect();
        let v_scaled = Mat::from_fn(n, r, |i, j| eh.vectors[(i, keep[j])] / eh.values[keep[j]].sqrt());
        let basis = &v_scaled * &eb.vectors;
        Ok(SpectralSystem {
            basis,
            gamma: eb.values,
            rhs,
        })
    }

    fn coefficients(&self, c: f64) -> Vec<f64> {
        self.rhs
            .iter()
            .zip(&self.gamma)
            .map(|(u, g)| u / (g + c))
            .collect()
    }

    fn alpha(&self, c: f64) -> Vec<f64> {
        mat_vec(&self.basis, &self.coefficients(c))
    }
}

fn mat_vec(m: &Mat<f64>, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.nrows()];
    for (j, xj) in x.iter().enumerate() {
        if *xj == 0.0 {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o += m[(i, j)] * xj;
        }
    }
    out
}

fn check_alpha(alpha: &[f64]) -> Result<()> {
    if alpha.iter().all(|a| a.is_finite()) {
        Ok(())
    } else {
        Err(OpeError::NumericalFailure("non-finite NPIV coefficients".into()))
    }
}

fn check_gram(g: &Mat<f64>, which: &str) -> Result<()> {
    crate::linalg::check_finite(g)
        .map_err(|_| OpeError::NumericalFailure(format!("non-finite entries in {which} Gram matrix")))
}

/// Closed-form coefficients from precomputed Grams. No sample-size guard.
fn closed_form_spectral(k_h: &Mat<f64>, k_f: &Mat<f64>, y: &[f64], hp: &HyperParams) -> Result<Vec<f64>> {
    check_gram(k_h, "hypothesis")?;
    check_gram(k_f, "instrument")?;
    let c = 4.0 * hp.lambda2_mu;
    if c <= 0.0 {
        return closed_form_pinv(k_h, k_f, y, hp);
    }
    if y.iter().all(|&v| v == 0.0) {
        return Ok(vec![0.0; y.len()]);
    }
    let m = InstrumentWeights::new(k_f, hp.ratio_m_delta2)?;
    let alpha = SpectralSystem::new(k_h, &m, y)?.alpha(c);
    check_alpha(&alpha)?;
    Ok(alpha)
}

fn closed_form_pinv(k_h: &Mat<f64>, k_f: &Mat<f64>, y: &[f64], hp: &HyperParams) -> Result<Vec<f64>> {
    check_gram(k_h, "hypothesis")?;
    check_gram(k_f, "instrument")?;
    let m = InstrumentWeights::new(k_f, hp.ratio_m_delta2)?.matrix();
    let khm = k_h * &m;
    let mut a = &khm * k_h;
    let c = 4.0 * hp.lambda2_mu;
    let n = k_h.nrows();
    for j in 0..n {
        for i in 0..n {
            a[(i, j)] += c * k_h[(i, j)];
        }
    }
    let rhs = mat_vec(&khm, y);
    let alpha = mat_vec(&pinv(&a, PINV_REL_TOL)?, &rhs);
    check_alpha(&alpha)?;
    Ok(alpha)
}

fn grams(problem: &NpivProblem) -> Result<(Mat<f64>, Mat<f64>)> {
    let k_h = gram(&problem.hypothesis_features, &problem.kernel_h)?.into_matrix();
    let k_f = gram(&problem.instrument_features, &problem.kernel_f)?.into_matrix();
    Ok((k_h, k_f))
}

/// Fit the closed-form estimator (eigenbasis evaluation).
pub fn fit_npiv(problem: &NpivProblem, hp: &HyperParams) -> Result<NpivModel> {
    problem.validate()?;
    hp.validate()?;
    let (k_h, k_f) = grams(problem)?;
    let alpha = closed_form_spectral(&k_h, &k_f, &problem.response, hp)?;
    Ok(NpivModel {
        alpha,
        anchors: problem.hypothesis_features.clone(),
        kernel_h: problem.kernel_h,
    })
}

/// Fit the closed-form estimator by explicitly pseudo-inverting
/// `K_H M K_H + 4 lambda2_mu K_H`. Cubic per call.
pub fn fit_npiv_pinv(problem: &NpivProblem, hp: &HyperParams) -> Result<NpivModel> {
    problem.validate()?;
    hp.validate()?;
    let (k_h, k_f) = grams(problem)?;
    let alpha = closed_form_pinv(&k_h, &k_f, &problem.response, hp)?;
    Ok(NpivModel {
        alpha,
        anchors: problem.hypothesis_features.clone(),
        kernel_h: problem.kernel_h,
    })
}

/// Outcome of [`cv_select_scale`].
#[derive(Debug, Clone)]
pub struct CvSelection {
    pub best_scale: f64,
    pub model: NpivModel,
    /// Mean validation loss for each pool entry, in pool order.
    pub mean_losses: Vec<f64>,
}

/// Random partition of `0..n` into `folds` near-equal groups.
pub fn fold_partition(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(OpeError::invalid(format!("need at least 2 folds, got {folds}")));
    }
    if n < folds {
        return Err(OpeError::invalid(format!("n = {n} is smaller than folds = {folds}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / folds;
    let extra = n % folds;
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for k in 0..folds {
        let len = base + usize::from(k < extra);
        let mut f = idx[start..start + len].to_vec();
        f.sort_unstable();
        out.push(f);
        start += len;
    }
    Ok(out)
}

fn fold_losses(
    k_h: &Mat<f64>,
    k_f: &Mat<f64>,
    y: &[f64],
    val: &[usize],
    scale_pool: &[f64],
) -> Result<Vec<f64>> {
    let n = y.len();
    let mut in_val = vec![false; n];
    for &i in val {
        in_val[i] = true;
    }
    let train: Vec<usize> = (0..n).filter(|&i| !in_val[i]).collect();
    let nt = train.len();
    let sub = |m: &Mat<f64>, r: &[usize], c: &[usize]| Mat::from_fn(r.len(), c.len(), |i, j| m[(r[i], c[j])]);

    let ratio_train = HyperParams::for_sample_size(1.0, nt)?.ratio_m_delta2;
    let ratio_val = HyperParams::for_sample_size(1.0, val.len())?.ratio_m_delta2;
    let y_train: Vec<f64> = train.iter().map(|&i| y[i]).collect();
    let y_val: Vec<f64> = val.iter().map(|&i| y[i]).collect();

    let m_train = InstrumentWeights::new(&sub(k_f, &train, &train), ratio_train)?;
    let m_val = InstrumentWeights::new(&sub(k_f, val, val), ratio_val)?;

    if y_train.iter().all(|&v| v == 0.0) {
        // alpha is identically zero for every scale
        let l = m_val.quad_form(&y_val);
        return Ok(vec![l; scale_pool.len()]);
    }
    let system = SpectralSystem::new(&sub(k_h, &train, &train), &m_train, &y_train)?;
    let k_val_train = sub(k_h, val, &train);
    let projected = &k_val_train * &system.basis;

    scale_pool
        .iter()
        .map(|&scale| {
            let c = 4.0 * scaling_zeta(scale, nt)?;
            let coef = system.coefficients(c);
            let pred = mat_vec(&projected, &coef);
            let resid: Vec<f64> = y_val.iter().zip(&pred).map(|(a, b)| a - b).collect();
            if !resid.iter().all(|e| e.is_finite()) {
                return Err(OpeError::NumericalFailure("non-finite validation residuals".into()));
            }
            Ok(m_val.quad_form(&resid))
        })
        .collect()
}

/// K-fold selection of the regularization scale, then a refit on all samples.
///
/// The fold partition is drawn once from `rng_seed` and shared by every scale.
/// Ties in the mean loss go to the smallest scale.
pub fn cv_select_scale(
    problem: &NpivProblem,
    scale_pool: &[f64],
    folds: usize,
    rng_seed: u64,
) -> Result<CvSelection> {
    problem.validate()?;
    if scale_pool.is_empty() {
        return Err(OpeError::invalid("scale pool is empty"));
    }
    if let Some(s) = scale_pool.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(OpeError::invalid(format!("scale pool entry {s} is not positive")));
    }
    let n = problem.len();
    let partition = fold_partition(n, folds, rng_seed)?;
    let (k_h, k_f) = grams(problem)?;
    check_gram(&k_h, "hypothesis")?;
    check_gram(&k_f, "instrument")?;

    let per_fold: Vec<Vec<f64>> = partition
        .par_iter()
        .map(|val| fold_losses(&k_h, &k_f, &problem.response, val, scale_pool))
        .collect::<Result<_>>()?;

    let mean_losses: Vec<f64> = (0..scale_pool.len())
        .map(|s| per_fold.iter().map(|f| f[s]).sum::<f64>() / folds as f64)
        .collect();

    let mut best = 0;
    for s in 1..scale_pool.len() {
        let (l, lb) = (mean_losses[s], mean_losses[best]);
        if l < lb || (l == lb && scale_pool[s] < scale_pool[best]) {
            best = s;
        }
    }
    let best_scale = scale_pool[best];
    let hp = HyperParams::for_sample_size(best_scale, n)?;
    let alpha = closed_form_spectral(&k_h, &k_f, &problem.response, &hp)?;
    Ok(CvSelection {
        best_scale,
        model: NpivModel {
            alpha,
            anchors: problem.hypothesis_features.clone(),
            kernel_h: problem.kernel_h,
        },
        mean_losses,
    })
}

/// `count` points spaced evenly on a log scale over `[lo, hi]`, endpoints included.
pub fn log_spaced_pool(count: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if count == 0 || !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(OpeError::invalid(format!(
            "invalid log pool: count={count}, lo={lo}, hi={hi}"
        )));
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..count)
        .map(|i| {
            if i == 0 {
                lo
            } else if i == count - 1 {
                hi
            } else {
                (a + (b - a) * i as f64 / (count - 1) as f64).exp()
            }
        })
        .collect())
}
