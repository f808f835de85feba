//! Confounded POMDP simulator with a 2-D observed state, a scalar hidden
//! state `U`, a reward-side proxy `W` and an action-side proxy `Z`.
//!
//! Per step, from observed state `S`:
//! 1. `A ~ pi_b(. | S)` (the behavior policy marginalized over `U`),
//! 2. `(Z, W, U) | (S, A) ~ N(mean(S, A), Sigma)`,
//! 3. `R = expit(A (U + S1 - 2 S2) / 2) + Uniform[-h, h]`,
//! 4. `S' = S + A U [1, 1] + N(0, I)`.
//!
//! Every trajectory draws from its own ChaCha stream, so results do not depend
//! on how trajectories are scheduled across threads.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};
use crate::policy::{epsilon_greedy_prob, Action, Policy};

/// How `S_1` is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum S1Sampler {
    /// Uniform on `[-2, 2]^2`.
    StdUniformBox,
    /// Standard bivariate normal.
    StdNormal,
}

/// Reward mechanism; the constant variant exists for testing the harness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RewardModel {
    Expit,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    pub alpha0: f64,
    pub alpha_a: f64,
    pub alpha_s: [f64; 2],
    pub mu0: f64,
    pub mu_a: f64,
    pub mu_s: [f64; 2],
    pub kappa0: f64,
    pub kappa_a: f64,
    pub kappa_s: [f64; 2],
    /// Covariance of `(Z, W, U)` given `(S, A)`.
    pub sigma: [[f64; 3]; 3],
    pub t0: f64,
    pub tu: f64,
    pub ts: [f64; 2],
    pub reward_noise_halfwidth: f64,
    pub epsilon_greedy: f64,
    pub s1_sampler: S1Sampler,
    pub reward: RewardModel,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            alpha0: 0.0,
            alpha_a: 0.5,
            alpha_s: [0.5, 0.5],
            mu0: 0.0,
            mu_a: -0.25,
            mu_s: [0.5, 0.5],
            kappa0: 0.0,
            kappa_a: -0.5,
            kappa_s: [0.5, 0.5],
            sigma: [[1.0, 0.25, 0.5], [0.25, 1.0, 0.5], [0.5, 0.5, 1.0]],
            t0: 0.0,
            tu: 1.0,
            ts: [-0.5, -0.5],
            reward_noise_halfwidth: 0.1,
            epsilon_greedy: 0.2,
            s1_sampler: S1Sampler::StdNormal,
            reward: RewardModel::Expit,
        }
    }
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn dot2(a: &[f64; 2], b: &[f64]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        let s = &self.sigma;
        for i in 0..3 {
            if !(s[i][i] > 0.0) {
                return Err(OpeError::invalid("Sigma must have a positive diagonal"));
            }
            for j in 0..3 {
                if !s[i][j].is_finite() || s[i][j] != s[j][i] {
                    return Err(OpeError::invalid("Sigma must be finite and symmetric"));
                }
            }
        }
        self.sigma_cholesky()?;
        if !(0.0..=1.0).contains(&self.epsilon_greedy) {
            return Err(OpeError::invalid("epsilon_greedy must lie in [0, 1]"));
        }
        if !(self.reward_noise_halfwidth >= 0.0 && self.reward_noise_halfwidth.is_finite()) {
            return Err(OpeError::invalid("reward noise halfwidth must be nonnegative"));
        }
        Ok(())
    }

    /// Lower Cholesky factor of Sigma; a zero pivot is allowed for PSD singular Sigma.
    fn sigma_cholesky(&self) -> Result<[[f64; 3]; 3]> {
        let s = &self.sigma;
        let mut l = [[0.0; 3]; 3];
        let scale = s[0][0].max(s[1][1]).max(s[2][2]);
        for i in 0..3 {
            for j in 0..=i {
                let acc: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
                if i == j {
                    let d = s[i][i] - acc;
                    if d < -1e-12 * scale {
                        return Err(OpeError::invalid("Sigma is not positive semi-definite"));
                    }
                    l[i][i] = d.max(0.0).sqrt();
                } else if l[j][j] > 0.0 {
                    l[i][j] = (s[i][j] - acc) / l[j][j];
                } else if (s[i][j] - acc).abs() > 1e-12 * scale {
                    return Err(OpeError::invalid("Sigma is not positive semi-definite"));
                }
            }
        }
        Ok(l)
    }

    /// Conditional mean of `(Z, W, U)` given `(S, A)`.
    pub fn latent_mean(&self, s: &[f64], a: Action) -> [f64; 3] {
        let a = a.value();
        [
            self.alpha0 + self.alpha_a * a + dot2(&self.alpha_s, s),
            self.mu0 + self.mu_a * a + dot2(&self.mu_s, s),
            self.kappa0 + self.kappa_a * a + dot2(&self.kappa_s, s),
        ]
    }

    pub fn reward_mean(&self, u: f64, s: &[f64], a: Action) -> f64 {
        match self.reward {
            RewardModel::Expit => expit(0.5 * a.value() * (u + s[0] - 2.0 * s[1])),
            RewardModel::Constant(c) => c,
        }
    }
}

/// `expit(-a (t0 + tu u + ts^T s))`.
pub fn behavior_policy_prob(params: &SimParams, u: f64, s: &[f64], a: Action) -> f64 {
    expit(-a.value() * (params.t0 + params.tu * u + dot2(&params.ts, s)))
}

/// `expit(-a (t0 + tu kappa0 + (ts + tu kappa_s)^T s))`.
pub fn marginal_behavior_prob(params: &SimParams, s: &[f64], a: Action) -> f64 {
    let coef = [
        params.ts[0] + params.tu * params.kappa_s[0],
        params.ts[1] + params.tu * params.kappa_s[1],
    ];
    expit(-a.value() * (params.t0 + params.tu * params.kappa0 + dot2(&coef, s)))
}

/// Greedy action for the immediate reward: `sign(kappa0 + (kappa_s + [1, -2])^T s)`.
pub fn greedy_action(params: &SimParams, s: &[f64]) -> Action {
    let coef = [params.kappa_s[0] + 1.0, params.kappa_s[1] - 2.0];
    Action::sign_of(params.kappa0 + dot2(&coef, s))
}

/// Draw from the epsilon-greedy target policy.
pub fn target_policy<R: Rng + ?Sized>(params: &SimParams, s: &[f64], rng: &mut R) -> Action {
    let greedy = greedy_action(params, s);
    let explore: f64 = rng.random();
    let coin: f64 = rng.random();
    if explore < params.epsilon_greedy {
        if coin < 0.5 {
            Action::Neg
        } else {
            Action::Pos
        }
    } else {
        greedy
    }
}

/// The epsilon-greedy target policy as a [`Policy`].
#[derive(Debug, Clone)]
pub struct TargetPolicy {
    params: SimParams,
}

impl TargetPolicy {
    pub fn new(params: &SimParams) -> Self {
        TargetPolicy {
            params: params.clone(),
        }
    }
}

impl Policy for TargetPolicy {
    fn prob(&self, _t: usize, state: &[f64], action: Action) -> f64 {
        epsilon_greedy_prob(greedy_action(&self.params, state), self.params.epsilon_greedy, action)
    }
}

/// Observed trajectories, stored row-major by `(trajectory, step)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    n: usize,
    horizon: usize,
    pub s: Vec<[f64; 2]>,
    pub w: Vec<f64>,
    pub z: Vec<f64>,
    pub a: Vec<Action>,
    pub r: Vec<f64>,
}

impl TrajectoryBatch {
    pub fn new(
        n: usize,
        horizon: usize,
        s: Vec<[f64; 2]>,
        w: Vec<f64>,
        z: Vec<f64>,
        a: Vec<Action>,
        r: Vec<f64>,
    ) -> Result<Self> {
        let len = n * horizon;
        if n == 0 || horizon == 0 {
            return Err(OpeError::invalid("batch needs n >= 1 and T >= 1"));
        }
        if [s.len(), w.len(), z.len(), a.len(), r.len()].iter().any(|&l| l != len) {
            return Err(OpeError::invalid(format!("batch arrays must all have length n*T = {len}")));
        }
        let finite = s.iter().all(|v| v[0].is_finite() && v[1].is_finite())
            && w.iter().chain(&z).chain(&r).all(|v| v.is_finite());
        if !finite {
            return Err(OpeError::invalid("batch contains non-finite values"));
        }
        Ok(TrajectoryBatch {
            n,
            horizon,
            s,
            w,
            z,
            a,
            r,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Flat index of trajectory `i` at 0-based step `t`.
    #[inline]
    pub fn idx(&self, i: usize, t: usize) -> usize {
        i * self.horizon + t
    }

    /// Keep only the first `horizon` steps of every trajectory.
    pub fn truncate(&self, horizon: usize) -> Result<TrajectoryBatch> {
        if horizon == 0 || horizon > self.horizon {
            return Err(OpeError::invalid(format!(
                "cannot truncate horizon {} to {horizon}",
                self.horizon
            )));
        }
        let keep = |i: usize| i % self.horizon < horizon;
        fn pick<T: Copy>(v: &[T], keep: impl Fn(usize) -> bool) -> Vec<T> {
            v.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, x)| *x).collect()
        }
        TrajectoryBatch::new(
            self.n,
            horizon,
            pick(&self.s, keep),
            pick(&self.w, keep),
            pick(&self.z, keep),
            pick(&self.a, keep),
            pick(&self.r, keep),
        )
    }

    /// Copy with every reward multiplied by `c`.
    pub fn with_scaled_rewards(&self, c: f64) -> TrajectoryBatch {
        TrajectoryBatch {
            r: self.r.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }

    /// Columnar CSV: `traj,t,s1,s2,w,z,a,r`, `traj` from 0, `t` from 1.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["traj", "t", "s1", "s2", "w", "z", "a", "r"])?;
        for i in 0..self.n {
            for t in 0..self.horizon {
                let k = self.idx(i, t);
                wtr.serialize((
                    i,
                    t + 1,
                    self.s[k][0],
                    self.s[k][1],
                    self.w[k],
                    self.z[k],
                    self.a[k].as_i8(),
                    self.r[k],
                ))?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<TrajectoryBatch> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["traj", "t", "s1", "s2", "w", "z", "a", "r"] {
            return Err(OpeError::invalid(format!("unexpected batch header {header:?}")));
        }
        type Row = (usize, usize, f64, f64, f64, f64, i64, f64);
        let rows: Vec<Row> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        let horizon = rows.iter().map(|r| r.1).max().unwrap_or(0);
        if horizon == 0 || !rows.len().is_multiple_of(horizon) {
            return Err(OpeError::invalid("batch file has ragged trajectories"));
        }
        let n = rows.len() / horizon;
        let (mut s, mut w, mut z, mut a, mut r) = (vec![], vec![], vec![], vec![], vec![]);
        for (k, row) in rows.iter().enumerate() {
            if row.0 != k / horizon || row.1 != k % horizon + 1 {
                return Err(OpeError::invalid(format!(
                    "row {k}: expected traj {} t {}, found traj {} t {}",
                    k / horizon,
                    k % horizon + 1,
                    row.0,
                    row.1
                )));
            }
            s.push([row.2, row.3]);
            w.push(row.4);
            z.push(row.5);
            a.push(Action::from_i64(row.6).ok_or_else(|| {
                OpeError::invalid(format!("row {k}: action must be -1 or 1, got {}", row.6))
            })?);
            r.push(row.7);
        }
        TrajectoryBatch::new(n, horizon, s, w, z, a, r)
    }
}

const STREAM_BATCH: u64 = 0;
const STREAM_ROLLOUT: u64 = 1 << 62;
const STREAM_PROBE: u64 = 2 << 62;

fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain | index);
    rng
}

struct Sampler {
    params: SimParams,
    chol: [[f64; 3]; 3],
}

impl Sampler {
    fn new(params: &SimParams) -> Result<Self> {
        params.validate()?;
        Ok(Sampler {
            chol: params.sigma_cholesky()?,
            params: params.clone(),
        })
    }

    fn initial_state(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        match self.params.s1_sampler {
            S1Sampler::StdNormal => [rng.sample(StandardNormal), rng.sample(StandardNormal)],
            S1Sampler::StdUniformBox => [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
        }
    }

    fn behavior_action(&self, s: &[f64; 2], rng: &mut ChaCha8Rng) -> Action {
        let p_pos = marginal_behavior_prob(&self.params, s, Action::Pos);
        if rng.random::<f64>() < p_pos {
            Action::Pos
        } else {
            Action::Neg
        }
    }

    fn latent(&self, s: &[f64; 2], a: Action, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let m = self.params.latent_mean(s, a);
        let xi: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let l = &self.chol;
        [
            m[0] + l[0][0] * xi[0],
            m[1] + l[1][0] * xi[0] + l[1][1] * xi[1],
            m[2] + l[2][0] * xi[0] + l[2][1] * xi[1] + l[2][2] * xi[2],
        ]
    }

    fn reward(&self, u: f64, s: &[f64; 2], a: Action, rng: &mut ChaCha8Rng) -> f64 {
        let h = self.params.reward_noise_halfwidth;
        let noise = if h > 0.0 { rng.random_range(-h..=h) } else { 0.0 };
        match self.params.reward {
            RewardModel::Constant(c) => c,
            RewardModel::Expit => self.params.reward_mean(u, s, a) + noise,
        }
    }

    fn transition(&self, s: &[f64; 2], u: f64, a: Action, rng: &mut ChaCha8Rng) -> [f64; 2] {
        let shift = a.value() * u;
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        [s[0] + shift + e0, s[1] + shift + e1]
    }
}

/// One behavior trajectory: per step `(s, w, z, a, r, u)`.
type StepRecord = ([f64; 2], f64, f64, Action, f64, f64);

fn behavior_trajectory(sampler: &Sampler, horizon: usize, rng: &mut ChaCha8Rng) -> Vec<StepRecord> {
    let mut s = sampler.initial_state(rng);
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let a = sampler.behavior_action(&s, rng);
        let [z, w, u] = sampler.latent(&s, a, rng);
        let r = sampler.reward(u, &s, a, rng);
        let next = sampler.transition(&s, u, a, rng);
        out.push((s, w, z, a, r, u));
        s = next;
    }
    out
}

/// Behavior-policy batch together with the hidden `U` of every step (same layout).
pub fn sample_batch_with_latent(
    params: &SimParams,
    n: usize,
    horizon: usize,
    seed: u64,
) -> Result<(TrajectoryBatch, Vec<f64>)> {
    if n == 0 || horizon == 0 {
        return Err(OpeError::invalid("sample_batch needs n >= 1 and T >= 1"));
    }
    let sampler = Sampler::new(params)?;
    let trajs: Vec<Vec<StepRecord>> = (0..n)
        .into_par_iter()
        .map(|i| behavior_trajectory(&sampler, horizon, &mut stream(seed, STREAM_BATCH, i as u64)))
        .collect();
    let len = n * horizon;
    let (mut s, mut w, mut z, mut a, mut r, mut u) = (
        Vec::with_capacity(len),
        Vec::with_capacity(len),
        Vec::with_capacity(len),
        Vec::with_capacity(len),
        Vec::with_capacity(len),
        Vec::with_capacity(len),
    );
    for step in trajs.into_iter().flatten() {
        s.push(step.0);
        w.push(step.1);
        z.push(step.2);
        a.push(step.3);
        r.push(step.4);
        u.push(step.5);
    }
    Ok((TrajectoryBatch::new(n, horizon, s, w, z, a, r)?, u))
}

/// `n` behavior-policy trajectories of length `horizon`.
pub fn sample_batch(params: &SimParams, n: usize, horizon: usize, seed: u64) -> Result<TrajectoryBatch> {
    sample_batch_with_latent(params, n, horizon, seed).map(|(b, _)| b)
}

/// `count` draws of `(Z, W, U)` given fixed `(S, A)`.
pub fn sample_latent_at(params: &SimParams, s: [f64; 2], a: Action, count: usize, seed: u64) -> Result<Vec<[f64; 3]>> {
    let sampler = Sampler::new(params)?;
    let mut rng = stream(seed, STREAM_PROBE, 0);
    Ok((0..count).map(|_| sampler.latent(&s, a, &mut rng)).collect())
}

/// Monte Carlo value of the epsilon-greedy target policy: mean and standard
/// error of the cumulative reward over `num_rollouts` trajectories.
///
/// The hidden state is drawn as in the batch data, i.e. from its law given `S`
/// under the behavior mechanism; the action taken is then the target's.
pub fn mc_policy_value(params: &SimParams, horizon: usize, num_rollouts: usize, seed: u64) -> Result<(f64, f64)> {
    if num_rollouts == 0 {
        return Err(OpeError::invalid("num_rollouts must be at least 1"));
    }
    if horizon == 0 {
        return Err(OpeError::invalid("horizon must be at least 1"));
    }
    let sampler = Sampler::new(params)?;
    let returns: Vec<f64> = (0..num_rollouts)
        .into_par_iter()
        .map(|i| {
            let rng = &mut stream(seed, STREAM_ROLLOUT, i as u64);
            let mut s = sampler.initial_state(rng);
            let mut total = 0.0;
            for _ in 0..horizon {
                let a_b = sampler.behavior_action(&s, rng);
                let [_, _, u] = sampler.latent(&s, a_b, rng);
                let a = target_policy(&sampler.params, &s, rng);
                total += sampler.reward(u, &s, a, rng);
                s = sampler.transition(&s, u, a, rng);
            }
            total
        })
        .collect();
    let m = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / m;
    let se = if returns.len() > 1 {
        let var = returns.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0);
        (var / m).sqrt()
    } else {
        0.0
    };
    Ok((mean, se))
}
