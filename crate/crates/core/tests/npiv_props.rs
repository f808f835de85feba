use ope_core::kernel::{gram, median_heuristic, FeatureMatrix, KernelSpec};
use ope_core::npiv::{
    cv_select_scale, fit_npiv, fit_npiv_pinv, log_spaced_pool, projected_loss, HyperParams, NpivProblem,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Scalar IV design: `Z = X + e_z`, `Y = X + e_y`, hypothesis on `X`.
fn iv_problem(n: usize, seed: u64) -> NpivProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let xi: f64 = rng.sample(StandardNormal);
        let ez: f64 = rng.sample(StandardNormal);
        let ey: f64 = rng.sample(StandardNormal);
        x.push(xi);
        z.push(xi + 0.3 * ez);
        y.push(xi + 0.3 * ey);
    }
    let xf = FeatureMatrix::new(1, x).unwrap();
    let zf = FeatureMatrix::new(1, z).unwrap();
    let kh = KernelSpec::gaussian(median_heuristic(&xf).unwrap()).unwrap();
    let kf = KernelSpec::gaussian(median_heuristic(&zf).unwrap()).unwrap();
    NpivProblem::new(xf, zf, y, kh, kf).unwrap()
}

fn residuals(p: &NpivProblem, hp: &HyperParams) -> Vec<f64> {
    let m = fit_npiv(p, hp).unwrap();
    let fit = m.predict(&p.hypothesis_features).unwrap();
    p.response.iter().zip(&fit).map(|(y, f)| y - f).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn coefficients_are_homogeneous_in_the_response(
        n in 5usize..80,
        seed in any::<u64>(),
        c in prop_oneof![-10.0f64..-0.01, 0.01f64..10.0],
        scale in 1e-3f64..0.1,
    ) {
        let p = iv_problem(n, seed);
        let hp = HyperParams::for_sample_size(scale, n).unwrap();
        let base = fit_npiv(&p, &hp).unwrap().alpha;
        let mut q = p.clone();
        q.response.iter_mut().for_each(|y| *y *= c);
        let scaled = fit_npiv(&q, &hp).unwrap().alpha;
        let norm = base.iter().map(|a| a.abs()).fold(0.0, f64::max).max(1e-300);
        for (a, b) in base.iter().zip(&scaled) {
            prop_assert!((b - c * a).abs() <= 1e-9 * norm * c.abs());
        }
    }

    #[test]
    fn projected_loss_is_nonnegative(
        n in 2usize..60,
        seed in any::<u64>(),
        ratio in 1e-3f64..1e3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let z = FeatureMatrix::new(2, (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let g = gram(&z, &KernelSpec::gaussian(rng.random_range(0.01..5.0)).unwrap()).unwrap();
        prop_assert!(projected_loss(&e, &g, ratio).unwrap() >= 0.0);
    }

    #[test]
    fn projected_residual_shrinks_with_regularization(n in 10usize..80, seed in any::<u64>()) {
        let p = iv_problem(n, seed);
        let ratio = HyperParams::for_sample_size(0.01, n).unwrap().ratio_m_delta2;
        let kf = gram(&p.instrument_features, &p.kernel_f).unwrap();
        let mut prev = f64::INFINITY;
        for lambda2_mu in [1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6] {
            let hp = HyperParams::new(ratio, lambda2_mu, 1.0).unwrap();
            let loss = projected_loss(&residuals(&p, &hp), &kf, ratio).unwrap();
            prop_assert!(loss <= prev * (1.0 + 1e-7) + 1e-12, "{} > {}", loss, prev);
            prev = loss;
        }
    }
}

// The two routes truncate different near-null directions of an ill-conditioned
// K_H, so fitted values agree only to a few digits here.
#[test]
fn spectral_and_pinv_routes_agree_on_predictions() {
    for seed in 0..5 {
        let p = iv_problem(60, seed);
        let hp = HyperParams::for_sample_size(0.02, 60).unwrap();
        let a = fit_npiv(&p, &hp).unwrap().predict(&p.hypothesis_features).unwrap();
        let b = fit_npiv_pinv(&p, &hp).unwrap().predict(&p.hypothesis_features).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-4, "seed {seed}: {x} vs {y}");
        }
    }
}

#[test]
fn cross_validation_recovers_a_linear_structural_function() {
    let p = iv_problem(400, 3);
    let pool = log_spaced_pool(30, 0.001, 0.05).unwrap();
    let sel = cv_select_scale(&p, &pool, 5, 1).unwrap();
    assert!(pool.contains(&sel.best_scale));
    let fit = sel.model.predict(&p.hypothesis_features).unwrap();
    let rmse = (fit
        .iter()
        .enumerate()
        .map(|(i, f)| (f - p.hypothesis_features.row(i)[0]).powi(2))
        .sum::<f64>()
        / 400.0)
        .sqrt();
    assert!(rmse < 0.3, "rmse {rmse}");
}
