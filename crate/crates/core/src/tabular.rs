//! Exact identification checks on finite confounded POMDPs.
//!
//! Per step `t`, from the joint state `(s, u)`: `W ~ P_t(w | u, s)`,
//! `A ~ pi_b_t(a | u, s)`, `Z ~ P_t(z | u, s, a)`, reward `r_t(s, u, a)` and
//! `(s', u') ~ P_t(. | s, u, a)`. Bridges are solved from exact conditional
//! laws computed by forward propagation of the behavior occupancy.

use std::path::Path;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};
use crate::linalg::{pinv, rank, PINV_REL_TOL};

/// Relative singular-value threshold for the rank conditions.
pub const RANK_REL_TOL: f64 = 1e-9;
/// Maximum tolerated residual of a bridge linear system.
pub const BRIDGE_RESIDUAL_TOL: f64 = 1e-8;
/// Attempts made by [`random_instance`] before giving up.
pub const MAX_GENERATION_ATTEMPTS: usize = 1000;

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TabularDims {
    pub n_s: usize,
    pub n_u: usize,
    pub n_w: usize,
    pub n_z: usize,
    pub n_a: usize,
    pub horizon: usize,
}

impl TabularDims {
    fn validate(&self) -> Result<()> {
        let d = [self.n_s, self.n_u, self.n_w, self.n_z, self.n_a, self.horizon];
        if d.contains(&0) {
            return Err(OpeError::invalid(format!("all tabular dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    #[inline]
    fn su(&self, s: usize, u: usize) -> usize {
        s * self.n_u + u
    }

    #[inline]
    fn sua(&self, s: usize, u: usize, a: usize) -> usize {
        self.su(s, u) * self.n_a + a
    }

    fn n_su(&self) -> usize {
        self.n_s * self.n_u
    }
}

/// Finite confounded POMDP. All tensors are flattened, one entry per time step:
///
/// - `initial[(s, u)]`
/// - `transition[t][(s, u, a)][(s', u')]`
/// - `w_emission[t][(s, u)][w]`
/// - `z_emission[t][(s, u, a)][z]`
/// - `reward[t][(s, u, a)]`
/// - `behavior[t][(s, u)][a]`
///
/// with composite indices in the listed order, last index fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPomdp {
    pub dims: TabularDims,
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub w_emission: Vec<Vec<f64>>,
    pub z_emission: Vec<Vec<f64>>,
    pub reward: Vec<Vec<f64>>,
    pub behavior: Vec<Vec<f64>>,
}

/// Target policy `pi_t(a | s)`, flattened as `probs[t][(s, a)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub n_s: usize,
    pub n_a: usize,
    pub probs: Vec<Vec<f64>>,
}

/// A POMDP together with the policy to evaluate; the on-disk instance format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularCase {
    pub pomdp: TabularPomdp,
    pub target: TabularPolicy,
}

fn check_rows(name: &str, v: &[f64], row_len: usize, rows: usize) -> Result<()> {
    if v.len() != row_len * rows {
        return Err(OpeError::invalid(format!(
            "{name}: expected {} entries, found {}",
            row_len * rows,
            v.len()
        )));
    }
    for (r, chunk) in v.chunks(row_len).enumerate() {
        if chunk.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(OpeError::invalid(format!("{name}: row {r} has a negative or non-finite entry")));
        }
        let s: f64 = chunk.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(OpeError::invalid(format!("{name}: row {r} sums to {s}")));
        }
    }
    Ok(())
}

impl TabularPomdp {
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        d.validate()?;
        let per_t = [
            ("transition", self.transition.len()),
            ("w_emission", self.w_emission.len()),
            ("z_emission", self.z_emission.len()),
            ("reward", self.reward.len()),
            ("behavior", self.behavior.len()),
        ];
        for (name, len) in per_t {
            if len != d.horizon {
                return Err(OpeError::invalid(format!("{name}: expected {} time steps, found {len}", d.horizon)));
            }
        }
        check_rows("initial", &self.initial, d.n_su(), 1)?;
        for t in 0..d.horizon {
            check_rows("transition", &self.transition[t], d.n_su(), d.n_su() * d.n_a)?;
            check_rows("w_emission", &self.w_emission[t], d.n_w, d.n_su())?;
            check_rows("z_emission", &self.z_emission[t], d.n_z, d.n_su() * d.n_a)?;
            check_rows("behavior", &self.behavior[t], d.n_a, d.n_su())?;
            let r = &self.reward[t];
            if r.len() != d.n_su() * d.n_a {
                return Err(OpeError::invalid("reward: wrong number of entries"));
            }
            if r.iter().any(|v| !(v.is_finite() && v.abs() <= 1.0)) {
                return Err(OpeError::invalid("reward entries must lie in [-1, 1]"));
            }
        }
        Ok(())
    }

    #[inline]
    fn p_w(&self, t: usize, s: usize, u: usize, w: usize) -> f64 {
        self.w_emission[t][self.dims.su(s, u) * self.dims.n_w + w]
    }

    #[inline]
    fn p_z(&self, t: usize, s: usize, u: usize, a: usize, z: usize) -> f64 {
        self.z_emission[t][self.dims.sua(s, u, a) * self.dims.n_z + z]
    }

    #[inline]
    fn p_b(&self, t: usize, s: usize, u: usize, a: usize) -> f64 {
        self.behavior[t][self.dims.sua(s, u, a)]
    }

    #[inline]
    fn p_next(&self, t: usize, s: usize, u: usize, a: usize, s2: usize, u2: usize) -> f64 {
        self.transition[t][self.dims.sua(s, u, a) * self.dims.n_su() + self.dims.su(s2, u2)]
    }

    #[inline]
    fn r(&self, t: usize, s: usize, u: usize, a: usize) -> f64 {
        self.reward[t][self.dims.sua(s, u, a)]
    }

    /// Occupancy over `(s, u)` at every step under the behavior policy.
    pub fn behavior_occupancy(&self) -> Vec<Vec<f64>> {
        let d = &self.dims;
        let mut occ = vec![self.initial.clone()];
        for t in 0..d.horizon.saturating_sub(1) {
            let cur = &occ[t];
            let mut next = vec![0.0; d.n_su()];
            for s in 0..d.n_s {
                for u in 0..d.n_u {
                    let p = cur[d.su(s, u)];
                    if p == 0.0 {
                        continue;
                    }
                    for a in 0..d.n_a {
                        let pa = p * self.p_b(t, s, u, a);
                        for s2 in 0..d.n_s {
                            for u2 in 0..d.n_u {
                                next[d.su(s2, u2)] += pa * self.p_next(t, s, u, a, s2, u2);
                            }
                        }
                    }
                }
            }
            occ.push(next);
        }
        occ
    }

    /// `P_t(u | z, s, a)` as an `n_z x n_u` matrix, or `None` when `(s, a)` has
    /// zero probability at `t`. Rows for impossible `z` are zero.
    fn u_posterior(&self, occ_t: &[f64], t: usize, s: usize, a: usize) -> Option<Mat<f64>> {
        let d = &self.dims;
        let mass: f64 = (0..d.n_u).map(|u| occ_t[d.su(s, u)] * self.p_b(t, s, u, a)).sum();
        if mass <= 0.0 {
            return None;
        }
        let mut m = Mat::<f64>::zeros(d.n_z, d.n_u);
        for z in 0..d.n_z {
            let joint: Vec<f64> = (0..d.n_u)
                .map(|u| occ_t[d.su(s, u)] * self.p_b(t, s, u, a) * self.p_z(t, s, u, a, z))
                .collect();
            let pz: f64 = joint.iter().sum();
            if pz > 0.0 {
                for (u, j) in joint.iter().enumerate() {
                    m[(z, u)] = j / pz;
                }
            }
        }
        Some(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl TabularPolicy {
    pub fn uniform(n_s: usize, n_a: usize, horizon: usize) -> Self {
        TabularPolicy {
            n_s,
            n_a,
            probs: vec![vec![1.0 / n_a as f64; n_s * n_a]; horizon],
        }
    }

    #[inline]
    pub fn prob(&self, t: usize, s: usize, a: usize) -> f64 {
        self.probs[t][s * self.n_a + a]
    }

    pub fn validate_for(&self, dims: &TabularDims) -> Result<()> {
        if self.n_s != dims.n_s || self.n_a != dims.n_a || self.probs.len() != dims.horizon {
            return Err(OpeError::invalid("target policy dimensions do not match the POMDP"));
        }
        for p in &self.probs {
            check_rows("target", p, self.n_a, self.n_s)?;
        }
        Ok(())
    }
}

impl TabularCase {
    pub fn validate(&self) -> Result<()> {
        self.pomdp.validate()?;
        self.target.validate_for(&self.pomdp.dims)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: TabularCase = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        TabularCase::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum RankIssue {
    /// `P_t(W | U, s)` has rank below `|U|`.
    WEmission { t: usize, s: usize, rank: usize },
    /// `P_t(U | Z, a, s)` has rank below `|U|`.
    UPosterior { t: usize, s: usize, a: usize, rank: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RankReport {
    pub deficient: Vec<RankIssue>,
    /// `(t, s, a)` cells never visited by the behavior policy.
    pub skipped_unreachable: Vec<(usize, usize, usize)>,
}

impl RankReport {
    pub fn passed(&self) -> bool {
        self.deficient.is_empty()
    }
}

/// Full-rank checks on the proxy emission matrices for every step and state.
pub fn check_rank_conditions(pomdp: &TabularPomdp) -> Result<RankReport> {
    pomdp.validate()?;
    let d = &pomdp.dims;
    let occ = pomdp.behavior_occupancy();
    let mut report = RankReport::default();
    for t in 0..d.horizon {
        for s in 0..d.n_s {
            let w = Mat::from_fn(d.n_w, d.n_u, |w, u| pomdp.p_w(t, s, u, w));
            let r = rank(&w, RANK_REL_TOL)?;
            if r < d.n_u {
                report.deficient.push(RankIssue::WEmission { t, s, rank: r });
            }
            for a in 0..d.n_a {
                match pomdp.u_posterior(&occ[t], t, s, a) {
                    None => report.skipped_unreachable.push((t, s, a)),
                    Some(m) => {
                        let r = rank(&m, RANK_REL_TOL)?;
                        if r < d.n_u {
                            report.deficient.push(RankIssue::UPosterior { t, s, a, rank: r });
                        }
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Exact value of the target policy by backward induction over the full state `(s, u)`.
pub fn true_value_dp(pomdp: &TabularPomdp, target: &TabularPolicy) -> Result<f64> {
    pomdp.validate()?;
    target.validate_for(&pomdp.dims)?;
    let d = &pomdp.dims;
    let mut v_next = vec![0.0; d.n_su()];
    for t in (0..d.horizon).rev() {
        let mut v = vec![0.0; d.n_su()];
        for s in 0..d.n_s {
            for u in 0..d.n_u {
                let mut acc = 0.0;
                for a in 0..d.n_a {
                    let mut q = pomdp.r(t, s, u, a);
                    if t + 1 < d.horizon {
                        for s2 in 0..d.n_s {
                            for u2 in 0..d.n_u {
                                q += pomdp.p_next(t, s, u, a, s2, u2) * v_next[d.su(s2, u2)];
                            }
                        }
                    }
                    acc += target.prob(t, s, a) * q;
                }
                v[d.su(s, u)] = acc;
            }
        }
        v_next = v;
    }
    Ok(pomdp.initial.iter().zip(&v_next).map(|(p, v)| p * v).sum())
}

/// Q- and V-bridges on the observed proxies.
#[derive(Debug, Clone)]
pub struct QBridges {
    /// `q[t][(w, s, a)]`
    pub q: Vec<Vec<f64>>,
    /// `v[t][(w, s)]`
    pub v: Vec<Vec<f64>>,
    /// Largest `|M q - b|` over all solved cells.
    pub max_residual: f64,
}

/// Solve the conditional moment equations for the Q-bridges, backward in time.
/// Minimum-norm solutions are returned where the bridge is not unique; cells
/// the behavior policy never visits are left at zero.
pub fn solve_q_bridges(pomdp: &TabularPomdp, target: &TabularPolicy) -> Result<QBridges> {
    pomdp.validate()?;
    target.validate_for(&pomdp.dims)?;
    let d = pomdp.dims;
    let occ = pomdp.behavior_occupancy();
    let mut q_all = vec![Vec::new(); d.horizon];
    let mut v_all = vec![Vec::new(); d.horizon];
    let mut max_residual = 0.0f64;
    let wsa = |w: usize, s: usize, a: usize| (w * d.n_s + s) * d.n_a + a;

    for t in (0..d.horizon).rev() {
        // E[v_{t+1}(W', s') | s', u'] for the continuation term
        let cont: Vec<f64> = if t + 1 < d.horizon {
            let v_next = &v_all[t + 1];
            (0..d.n_su())
                .map(|su| {
                    let (s2, u2) = (su / d.n_u, su % d.n_u);
                    (0..d.n_w)
                        .map(|w| pomdp.p_w(t + 1, s2, u2, w) * v_next[w * d.n_s + s2])
                        .sum()
                })
                .collect()
        } else {
            vec![0.0; d.n_su()]
        };

        let mut q = vec![0.0; d.n_w * d.n_s * d.n_a];
        for s in 0..d.n_s {
            for a in 0..d.n_a {
                let Some(post) = pomdp.u_posterior(&occ[t], t, s, a) else {
                    continue;
                };
                let g: Vec<f64> = (0..d.n_u)
                    .map(|u| {
                        let mut acc = pomdp.r(t, s, u, a);
                        for su2 in 0..d.n_su() {
                            acc += pomdp.p_next(t, s, u, a, su2 / d.n_u, su2 % d.n_u) * cont[su2];
                        }
                        acc
                    })
                    .collect();
                let m = Mat::from_fn(d.n_z, d.n_w, |z, w| {
                    (0..d.n_u).map(|u| post[(z, u)] * pomdp.p_w(t, s, u, w)).sum()
                });
                let b: Vec<f64> = (0..d.n_z)
                    .map(|z| (0..d.n_u).map(|u| post[(z, u)] * g[u]).sum())
                    .collect();
                let mp = pinv(&m, PINV_REL_TOL)?;
                let sol: Vec<f64> = (0..d.n_w)
                    .map(|w| (0..d.n_z).map(|z| mp[(w, z)] * b[z]).sum())
                    .collect();
                let resid = (0..d.n_z)
                    .map(|z| ((0..d.n_w).map(|w| m[(z, w)] * sol[w]).sum::<f64>() - b[z]).abs())
                    .fold(0.0, f64::max);
                if !(resid <= BRIDGE_RESIDUAL_TOL) {
                    return Err(OpeError::NoBridgeSolution { t, s, a, residual: resid });
                }
                max_residual = max_residual.max(resid);
                for (w, val) in sol.into_iter().enumerate() {
                    q[wsa(w, s, a)] = val;
                }
            }
        }
        let v: Vec<f64> = (0..d.n_w * d.n_s)
            .map(|ws| {
                let (w, s) = (ws / d.n_s, ws % d.n_s);
                (0..d.n_a).map(|a| target.prob(t, s, a) * q[wsa(w, s, a)]).sum()
            })
            .collect();
        q_all[t] = q;
        v_all[t] = v;
    }
    Ok(QBridges {
        q: q_all,
        v: v_all,
        max_residual,
    })
}

/// Policy value through the first V-bridge: `E[v_1(W_1, S_1)]`.
pub fn ope_via_bridges(pomdp: &TabularPomdp, target: &TabularPolicy) -> Result<f64> {
    let bridges = solve_q_bridges(pomdp, target)?;
    Ok(value_from_bridges(pomdp, &bridges))
}

pub fn value_from_bridges(pomdp: &TabularPomdp, bridges: &QBridges) -> f64 {
    let d = &pomdp.dims;
    let v1 = &bridges.v[0];
    let mut total = 0.0;
    for s in 0..d.n_s {
        for u in 0..d.n_u {
            let p = pomdp.initial[d.su(s, u)];
            let ev: f64 = (0..d.n_w).map(|w| pomdp.p_w(0, s, u, w) * v1[w * d.n_s + s]).sum();
            total += p * ev;
        }
    }
    total
}

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * len);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..len).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let mut row: Vec<f64> = raw.iter().map(|v| v / s).collect();
        // make the row sum exact in floating point
        let last = 1.0 - row[..len - 1].iter().sum::<f64>();
        row[len - 1] = last;
        out.extend(row);
    }
    out
}

fn random_candidate(dims: &TabularDims, rng: &mut ChaCha8Rng) -> TabularPomdp {
    let d = dims;
    let per_t = |rng: &mut ChaCha8Rng, rows: usize, len: usize| -> Vec<Vec<f64>> {
        (0..d.horizon).map(|_| random_rows(rng, rows, len)).collect()
    };
    let initial = random_rows(rng, 1, d.n_su());
    let transition = per_t(rng, d.n_su() * d.n_a, d.n_su());
    let w_emission = per_t(rng, d.n_su(), d.n_w);
    let z_emission = per_t(rng, d.n_su() * d.n_a, d.n_z);
    let behavior = per_t(rng, d.n_su(), d.n_a);
    let reward = (0..d.horizon)
        .map(|_| (0..d.n_su() * d.n_a).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    TabularPomdp {
        dims: *d,
        initial,
        transition,
        w_emission,
        z_emission,
        reward,
        behavior,
    }
}

/// Random instance with full-support laws that passes [`check_rank_conditions`].
pub fn random_instance(dims: &TabularDims, seed: u64) -> Result<TabularPomdp> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let cand = random_candidate(dims, &mut rng);
        if check_rank_conditions(&cand)?.passed() {
            return Ok(cand);
        }
    }
    Err(OpeError::degenerate(format!(
        "no full-rank instance found for {dims:?} after {MAX_GENERATION_ATTEMPTS} attempts"
    )))
}

pub fn random_policy(n_s: usize, n_a: usize, horizon: usize, seed: u64) -> TabularPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TabularPolicy {
        n_s,
        n_a,
        probs: (0..horizon).map(|_| random_rows(&mut rng, n_s, n_a)).collect(),
    }
}

/// Small dimensions for identification sweeps: `|S| <= 3`,
/// `|U| = |W| = |Z|` in `{2, 3}`, two actions, horizon `<= 4`.
pub fn random_small_dims(seed: u64) -> TabularDims {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = rng.random_range(2..=3);
    TabularDims {
        n_s: rng.random_range(1..=3),
        n_u: latent,
        n_w: latent,
        n_z: latent,
        n_a: 2,
        horizon: rng.random_range(1..=4),
    }
}

/// A random case: instance, policy and the two values to compare.
pub fn random_case(seed: u64) -> Result<TabularCase> {
    let dims = random_small_dims(seed);
    let pomdp = random_instance(&dims, crate::seed::child_seed(seed, 1))?;
    let target = random_policy(dims.n_s, dims.n_a, dims.horizon, crate::seed::child_seed(seed, 2));
    Ok(TabularCase { pomdp, target })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(n_s: usize, n_u: usize, n_w: usize, n_z: usize, horizon: usize) -> TabularDims {
        TabularDims {
            n_s,
            n_u,
            n_w,
            n_z,
            n_a: 2,
            horizon,
        }
    }

    fn identity_rows(rows: usize, len: usize, f: impl Fn(usize) -> usize) -> Vec<f64> {
        let mut v = vec![0.0; rows * len];
        for r in 0..rows {
            v[r * len + f(r)] = 1.0;
        }
        v
    }

    #[test]
    fn no_confounding_passes() {
        let p = random_instance(&dims(2, 1, 2, 2, 2), 3).unwrap();
        assert!(check_rank_conditions(&p).unwrap().passed());
    }

    #[test]
    fn identity_emissions_pass() {
        let d = dims(2, 2, 2, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = random_candidate(&d, &mut rng);
        for t in 0..2 {
            // W = U and Z = U deterministically
            p.w_emission[t] = identity_rows(d.n_s * d.n_u, d.n_w, |r| r % d.n_u);
            p.z_emission[t] = identity_rows(d.n_s * d.n_u * d.n_a, d.n_z, |r| (r / d.n_a) % d.n_u);
        }
        p.validate().unwrap();
        assert!(check_rank_conditions(&p).unwrap().passed());
        let target = random_policy(2, 2, 2, 4);
        let v = ope_via_bridges(&p, &target).unwrap();
        assert!((v - true_value_dp(&p, &target).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn duplicate_w_rows_are_reported() {
        let d = dims(1, 2, 2, 2, 1);
        let mut p = random_instance(&d, 5).unwrap();
        // P(w | u=0) == P(w | u=1): the 2x2 emission matrix has rank 1
        p.w_emission[0] = vec![0.3, 0.7, 0.3, 0.7];
        let rep = check_rank_conditions(&p).unwrap();
        assert!(!rep.passed());
        assert_eq!(rep.deficient, vec![RankIssue::WEmission { t: 0, s: 0, rank: 1 }]);
    }

    #[test]
    fn too_few_proxy_categories_fail() {
        let d = dims(1, 3, 2, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_candidate(&d, &mut rng);
        assert!(!check_rank_conditions(&p).unwrap().passed());
        assert!(random_instance(&d, 1).is_err());
    }

    #[test]
    fn unreachable_cells_are_skipped() {
        let d = dims(2, 2, 2, 2, 2);
        let mut p = random_instance(&d, 8).unwrap();
        // start in s = 0 and never move to s = 1
        p.initial = vec![0.5, 0.5, 0.0, 0.0];
        let t0 = &mut p.transition[0];
        for row in t0.chunks_mut(4) {
            row.copy_from_slice(&[0.25, 0.75, 0.0, 0.0]);
        }
        let rep = check_rank_conditions(&p).unwrap();
        assert!(rep.skipped_unreachable.contains(&(0, 1, 0)));
        assert!(rep.skipped_unreachable.contains(&(1, 1, 1)));
        let target = random_policy(2, 2, 2, 1);
        let v = ope_via_bridges(&p, &target).unwrap();
        assert!((v - true_value_dp(&p, &target).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn dp_simple_cases() {
        let d = dims(1, 1, 1, 1, 3);
        let mut p = random_instance(&d, 0).unwrap();
        for r in &mut p.reward {
            r.iter_mut().for_each(|v| *v = 1.0);
        }
        let pol = TabularPolicy::uniform(1, 2, 3);
        assert!((true_value_dp(&p, &pol).unwrap() - 3.0).abs() < 1e-12);
        for r in &mut p.reward {
            r.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(true_value_dp(&p, &pol).unwrap(), 0.0);
        let b = solve_q_bridges(&p, &pol).unwrap();
        assert!(b.q.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(ope_via_bridges(&p, &pol).unwrap(), 0.0);
    }

    #[test]
    fn validation_catches_bad_rows() {
        let mut p = random_instance(&dims(1, 2, 2, 2, 1), 0).unwrap();
        p.behavior[0][0] += 0.1;
        assert!(p.validate().is_err());
        let mut p = random_instance(&dims(1, 2, 2, 2, 1), 0).unwrap();
        p.reward[0][0] = 1.5;
        assert!(p.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = random_case(17).unwrap();
        let back = TabularCase::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
