use ope_core::tabular::{
    check_rank_conditions, ope_via_bridges, random_case, random_instance, random_policy, solve_q_bridges,
    true_value_dp, TabularDims, TabularPolicy, TabularPomdp, BRIDGE_RESIDUAL_TOL,
};
use proptest::prelude::*;

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

/// Expected return by summing over every `(s, u, a)` path, weighted by its probability.
fn enumerate_paths(p: &TabularPomdp, pi: &TabularPolicy) -> f64 {
    let d = p.dims;
    let nsu = d.n_s * d.n_u;
    fn walk(p: &TabularPomdp, pi: &TabularPolicy, t: usize, su: usize, prob: f64, acc: f64) -> f64 {
        let d = p.dims;
        let nsu = d.n_s * d.n_u;
        let s = su / d.n_u;
        let mut total = 0.0;
        for a in 0..d.n_a {
            let pa = prob * pi.probs[t][s * d.n_a + a];
            if pa == 0.0 {
                continue;
            }
            let ret = acc + p.reward[t][su * d.n_a + a];
            if t + 1 == d.horizon {
                total += pa * ret;
            } else {
                for next in 0..nsu {
                    let pt = p.transition[t][(su * d.n_a + a) * nsu + next];
                    total += walk(p, pi, t + 1, next, pa * pt, ret);
                }
            }
        }
        total
    }
    (0..nsu).map(|su| walk(p, pi, 0, su, p.initial[su], 0.0)).sum()
}

#[test]
fn dp_matches_path_enumeration() {
    for seed in 0..20 {
        let d = dims(2, 2, 2, 2, 1 + seed as usize % 3);
        let p = random_instance(&d, seed).unwrap();
        let pi = random_policy(d.n_s, d.n_a, d.horizon, seed + 1000);
        let dp = true_value_dp(&p, &pi).unwrap();
        let brute = enumerate_paths(&p, &pi);
        assert!((dp - brute).abs() < 1e-12, "seed {seed}: {dp} vs {brute}");
    }
}

#[test]
fn fully_observed_bridges_are_q_functions() {
    for seed in 0..10 {
        let d = dims(3, 1, 1, 1, 3);
        let p = random_instance(&d, seed).unwrap();
        let pi = random_policy(3, 2, 3, seed + 7);
        let bridges = solve_q_bridges(&p, &pi).unwrap();
        // Q_t(s, a) by backward induction on the observed state only
        let mut v_next = vec![0.0; 3];
        for t in (0..3).rev() {
            let mut v = vec![0.0; 3];
            for s in 0..3 {
                for a in 0..2 {
                    let mut q = p.reward[t][s * 2 + a];
                    if t + 1 < 3 {
                        for s2 in 0..3 {
                            q += p.transition[t][(s * 2 + a) * 3 + s2] * v_next[s2];
                        }
                    }
                    assert!((bridges.q[t][s * 2 + a] - q).abs() < 1e-10, "t={t} s={s} a={a}");
                    v[s] += pi.probs[t][s * 2 + a] * q;
                }
            }
            v_next = v;
        }
        let value = ope_via_bridges(&p, &pi).unwrap();
        assert!((value - true_value_dp(&p, &pi).unwrap()).abs() < 1e-10);
    }
}

#[test]
fn hundred_random_instances_are_identified() {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let case = random_case(seed).unwrap();
        let report = check_rank_conditions(&case.pomdp).unwrap();
        assert!(report.passed());
        let bridges = solve_q_bridges(&case.pomdp, &case.target).unwrap();
        assert!(bridges.max_residual <= BRIDGE_RESIDUAL_TOL);
        let v = ope_via_bridges(&case.pomdp, &case.target).unwrap();
        let truth = true_value_dp(&case.pomdp, &case.target).unwrap();
        worst = worst.max((v - truth).abs());
    }
    assert!(worst <= 1e-6, "worst gap {worst}");
}

#[test]
fn two_by_two_horizon_three() {
    let d = dims(2, 2, 2, 2, 3);
    let p = random_instance(&d, 77).unwrap();
    let pi = random_policy(2, 2, 3, 78);
    let gap = (ope_via_bridges(&p, &pi).unwrap() - true_value_dp(&p, &pi).unwrap()).abs();
    assert!(gap <= 1e-6);
}

#[test]
fn overcomplete_reward_proxy_still_identifies_the_value() {
    for seed in 0..10 {
        let d = dims(2, 2, 4, 3, 3);
        let p = random_instance(&d, seed).unwrap();
        let pi = random_policy(2, 2, 3, seed + 50);
        let gap = (ope_via_bridges(&p, &pi).unwrap() - true_value_dp(&p, &pi).unwrap()).abs();
        assert!(gap <= 1e-6, "seed {seed}: {gap}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dp_is_linear_in_rewards(seed in 0u64..10_000, c in -1.0f64..1.0) {
        let case = random_case(seed).unwrap();
        let mut scaled = case.pomdp.clone();
        scaled.reward.iter_mut().flatten().for_each(|r| *r *= c);
        let a = true_value_dp(&case.pomdp, &case.target).unwrap();
        let b = true_value_dp(&scaled, &case.target).unwrap();
        prop_assert!((b - c * a).abs() <= 1e-12);
    }

    #[test]
    fn identification_holds_on_random_cases(seed in 0u64..1_000_000) {
        let case = random_case(seed).unwrap();
        let v = ope_via_bridges(&case.pomdp, &case.target).unwrap();
        let truth = true_value_dp(&case.pomdp, &case.target).unwrap();
        prop_assert!((v - truth).abs() <= 1e-6);
    }
}
