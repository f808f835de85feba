//! Fixtures shared by the benchmarks in `benches/`.

use ope_core::kernel::{median_heuristic, FeatureMatrix, KernelSpec};
use ope_core::npiv::NpivProblem;
use ope_core::simulator::{sample_batch, SimParams, TrajectoryBatch};

/// Behavior batch from the default simulator.
pub fn batch(n: usize, horizon: usize) -> TrajectoryBatch {
    sample_batch(&SimParams::default(), n, horizon, 17).expect("sampling a batch")
}

/// Last-step NPIV problem of a simulated batch: `[W, S, A]` against `[Z, S, A]`,
/// response `R`, median-heuristic bandwidths.
pub fn last_step_problem(n: usize) -> NpivProblem {
    let b = batch(n, 1);
    let rows = |proxy: &[f64]| -> Vec<[f64; 4]> {
        (0..n)
            .map(|i| [proxy[i], b.s[i][0], b.s[i][1], b.a[i].value()])
            .collect()
    };
    let h = FeatureMatrix::from_rows(&rows(&b.w)).expect("features");
    let f = FeatureMatrix::from_rows(&rows(&b.z)).expect("features");
    let kh = KernelSpec::gaussian(median_heuristic(&h).expect("bandwidth")).expect("kernel");
    let kf = KernelSpec::gaussian(median_heuristic(&f).expect("bandwidth")).expect("kernel");
    NpivProblem::new(h, f, b.r.clone(), kh, kf).expect("problem")
}
