//! Backward recursion over V-bridges.
//!
//! Starting from `v_{T+1} = 0`, each step `t = T, ..., 1` solves one NPIV
//! problem with hypothesis features `(W_t, S_t, A_t)`, instrument features
//! `(Z_t, S_t, A_t)` and response `R_t + v_{t+1}(W_{t+1}, S_{t+1})`, then
//! averages the fitted Q-bridge over the target policy to get `v_t` on the
//! batch. The policy value estimate is the batch mean of `v_1`.

use serde::Serialize;

use crate::error::{OpeError, Result};
use crate::kernel::{median_heuristic, FeatureMatrix, KernelSpec};
use crate::npiv::{cv_select_scale, fit_npiv, HyperParams, NpivModel, NpivProblem};
use crate::policy::{Action, Policy};
use crate::seed::child_seed;
use crate::simulator::TrajectoryBatch;

/// Minimum samples per fold required by cross-validated steps.
pub const MIN_SAMPLES_PER_FOLD: usize = 5;

/// Bandwidth choice for the per-step kernels.
#[derive(Debug, Clone)]
pub enum KernelChoice {
    /// Median heuristic on each step's hypothesis and instrument features.
    AutoMedian,
    /// `(kernel_h, kernel_f)` for steps `1..=T`, in order.
    Fixed(Vec<(KernelSpec, KernelSpec)>),
}

#[derive(Debug, Clone)]
pub enum Tuning {
    /// K-fold selection over a scale pool at every step.
    CrossValidated {
        scale_pool: Vec<f64>,
        folds: usize,
    },
    /// The same hyper-parameters at every step; no cross-validation.
    Fixed(HyperParams),
}

#[derive(Debug, Clone)]
pub struct FqeSettings {
    pub kernels: KernelChoice,
    pub tuning: Tuning,
    pub seed: u64,
}

impl FqeSettings {
    pub fn cross_validated(scale_pool: Vec<f64>, folds: usize, seed: u64) -> Self {
        FqeSettings {
            kernels: KernelChoice::AutoMedian,
            tuning: Tuning::CrossValidated { scale_pool, folds },
            seed,
        }
    }
}

/// Fitted bridge at one decision time.
#[derive(Debug, Clone)]
pub struct VBridgeStep {
    /// 1-based decision time.
    pub t: usize,
    pub model: NpivModel,
    pub kernel_f: KernelSpec,
    pub selected_scale: f64,
    /// `v_t(W_{t,i}, S_{t,i})` for every trajectory.
    pub v_values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OpeResult {
    pub value_estimate: f64,
    /// Steps ordered `t = 1..=T`.
    pub per_step: Vec<VBridgeStep>,
    pub n: usize,
    pub horizon: usize,
    pub seed: u64,
}

/// Compact per-step summary for reporting.
#[derive(Debug, Clone, Serialize)]
pub struct StepSummary {
    pub t: usize,
    pub selected_scale: f64,
    pub bandwidth_h: f64,
    pub bandwidth_f: f64,
}

impl OpeResult {
    pub fn selected_scales(&self) -> Vec<f64> {
        self.per_step.iter().map(|s| s.selected_scale).collect()
    }

    pub fn step_summaries(&self) -> Vec<StepSummary> {
        self.per_step
            .iter()
            .map(|s| StepSummary {
                t: s.t,
                selected_scale: s.selected_scale,
                bandwidth_h: s.model.kernel_h.bandwidth,
                bandwidth_f: s.kernel_f.bandwidth,
            })
            .collect()
    }
}

fn feature_row(proxy: f64, s: &[f64; 2], a: Action) -> [f64; 4] {
    [proxy, s[0], s[1], a.value()]
}

/// `v_t(w, s) = sum_a pi_t(a | s) q_t(w, s, a)`.
pub fn q_to_v<P: Policy + ?Sized>(q_model: &NpivModel, w: f64, s: &[f64; 2], policy: &P, t: usize) -> Result<f64> {
    let mut total = 0.0;
    for &a in policy.actions() {
        let p = policy.prob(t, s, a);
        if p == 0.0 {
            continue;
        }
        let q = FeatureMatrix::new(4, feature_row(w, s, a).to_vec())?;
        total += p * q_model.predict(&q)?[0];
    }
    Ok(total)
}

/// Policy-weighted bridge values on every trajectory at 0-based step `t0`.
fn v_on_batch<P: Policy + ?Sized>(model: &NpivModel, batch: &TrajectoryBatch, t0: usize, policy: &P) -> Result<Vec<f64>> {
    let n = batch.n();
    let actions = policy.actions();
    let mut rows = Vec::with_capacity(n * actions.len() * 4);
    let mut weights = Vec::with_capacity(n * actions.len());
    for i in 0..n {
        let k = batch.idx(i, t0);
        let s = &batch.s[k];
        for &a in actions {
            rows.extend_from_slice(&feature_row(batch.w[k], s, a));
            weights.push(policy.prob(t0 + 1, s, a));
        }
    }
    let pred = model.predict(&FeatureMatrix::new(4, rows)?)?;
    let m = actions.len();
    Ok((0..n)
        .map(|i| (0..m).map(|j| weights[i * m + j] * pred[i * m + j]).sum())
        .collect())
}

/// Arithmetic mean of `v_1` on the batch.
pub fn aggregate_policy_value(step1: &VBridgeStep) -> Result<f64> {
    if step1.t != 1 {
        return Err(OpeError::invalid(format!("expected the t = 1 step, got t = {}", step1.t)));
    }
    mean(&step1.v_values)
}

fn mean(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(OpeError::invalid("cannot average an empty vector"));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

fn step_problem(
    batch: &TrajectoryBatch,
    t0: usize,
    response: Vec<f64>,
    kernels: &KernelChoice,
) -> Result<NpivProblem> {
    let n = batch.n();
    let mut h = Vec::with_capacity(4 * n);
    let mut f = Vec::with_capacity(4 * n);
    for i in 0..n {
        let k = batch.idx(i, t0);
        h.extend_from_slice(&feature_row(batch.w[k], &batch.s[k], batch.a[k]));
        f.extend_from_slice(&feature_row(batch.z[k], &batch.s[k], batch.a[k]));
    }
    let h = FeatureMatrix::new(4, h)?;
    let f = FeatureMatrix::new(4, f)?;
    let (kh, kf) = match kernels {
        KernelChoice::AutoMedian => (
            KernelSpec::gaussian(median_heuristic(&h)?)?,
            KernelSpec::gaussian(median_heuristic(&f)?)?,
        ),
        KernelChoice::Fixed(list) => *list.get(t0).ok_or_else(|| {
            OpeError::invalid(format!("no kernel pair supplied for step {}", t0 + 1))
        })?,
    };
    NpivProblem::new(h, f, response, kh, kf)
}

/// Sequential min-max NPIV estimation of the V-bridges and the policy value.
pub fn estimate_v_bridges<P: Policy + ?Sized>(
    batch: &TrajectoryBatch,
    policy: &P,
    settings: &FqeSettings,
) -> Result<OpeResult> {
    let n = batch.n();
    let horizon = batch.horizon();
    if let Tuning::CrossValidated { scale_pool, folds } = &settings.tuning {
        if *folds < 2 {
            return Err(OpeError::invalid("cross-validation needs at least 2 folds"));
        }
        if n < MIN_SAMPLES_PER_FOLD * folds {
            return Err(OpeError::invalid(format!(
                "n = {n} is too small for {folds}-fold cross-validation (need n >= {})",
                MIN_SAMPLES_PER_FOLD * folds
            )));
        }
        if scale_pool.is_empty() {
            return Err(OpeError::invalid("scale pool is empty"));
        }
    }
    if let KernelChoice::Fixed(list) = &settings.kernels {
        if list.len() < horizon {
            return Err(OpeError::invalid(format!(
                "{} kernel pairs supplied for horizon {horizon}",
                list.len()
            )));
        }
    }

    let mut next_v = vec![0.0; n];
    let mut steps = Vec::with_capacity(horizon);
    for t0 in (0..horizon).rev() {
        let t = t0 + 1;
        let response: Vec<f64> = (0..n).map(|i| batch.r[batch.idx(i, t0)] + next_v[i]).collect();
        let problem = step_problem(batch, t0, response, &settings.kernels).map_err(|e| e.context(format!("step {t}")))?;
        let (model, scale) = match &settings.tuning {
            Tuning::CrossValidated { scale_pool, folds } => {
                let sel = cv_select_scale(&problem, scale_pool, *folds, child_seed(settings.seed, t as u64))
                    .map_err(|e| e.context(format!("step {t}")))?;
                (sel.model, sel.best_scale)
            }
            Tuning::Fixed(hp) => (
                fit_npiv(&problem, hp).map_err(|e| e.context(format!("step {t}")))?,
                hp.scale,
            ),
        };
        let v_values = v_on_batch(&model, batch, t0, policy)?;
        if !v_values.iter().all(|v| v.is_finite()) {
            return Err(OpeError::NumericalFailure(format!("non-finite bridge values at step {t}")));
        }
        next_v.clone_from(&v_values);
        steps.push(VBridgeStep {
            t,
            model,
            kernel_f: problem.kernel_f,
            selected_scale: scale,
            v_values,
        });
    }
    steps.reverse();
    let value_estimate = aggregate_policy_value(&steps[0])?;
    Ok(OpeResult {
        value_estimate,
        per_step: steps,
        n,
        horizon,
        seed: settings.seed,
    })
}
