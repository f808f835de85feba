use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ope_bench::{batch, last_step_problem};
use ope_core::fqe::{estimate_v_bridges, FqeSettings};
use ope_core::kernel::gram;
use ope_core::npiv::{cv_select_scale, fit_npiv, log_spaced_pool, HyperParams};
use ope_core::simulator::{sample_batch, SimParams, TargetPolicy};
use std::hint::black_box;

fn kernels(c: &mut Criterion) {
    let mut g = c.benchmark_group("gram");
    for n in [256, 512, 1024] {
        let p = last_step_problem(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &p, |b, p| {
            b.iter(|| gram(black_box(&p.hypothesis_features), &p.kernel_h).unwrap())
        });
    }
    g.finish();
}

fn npiv(c: &mut Criterion) {
    let mut g = c.benchmark_group("npiv");
    g.sample_size(10);
    let pool = log_spaced_pool(30, 0.001, 0.05).unwrap();
    for n in [256, 512] {
        let p = last_step_problem(n);
        let hp = HyperParams::for_sample_size(0.01, n).unwrap();
        g.bench_with_input(BenchmarkId::new("fit", n), &p, |b, p| b.iter(|| fit_npiv(black_box(p), &hp).unwrap()));
        g.bench_with_input(BenchmarkId::new("cv_select_scale", n), &p, |b, p| {
            b.iter(|| cv_select_scale(black_box(p), &pool, 5, 1).unwrap())
        });
    }
    g.finish();
}

fn simulation(c: &mut Criterion) {
    let params = SimParams::default();
    let mut g = c.benchmark_group("simulator");
    g.bench_function("sample_batch/1024x3", |b| {
        b.iter(|| sample_batch(black_box(&params), 1024, 3, 5).unwrap())
    });
    g.finish();
}

fn pipeline(c: &mut Criterion) {
    let params = SimParams::default();
    let policy = TargetPolicy::new(&params);
    let settings = FqeSettings::cross_validated(log_spaced_pool(30, 0.001, 0.05).unwrap(), 5, 3);
    let data = batch(256, 3);
    let mut g = c.benchmark_group("fqe");
    g.sample_size(10);
    g.bench_function("estimate_v_bridges/256x3", |b| {
        b.iter(|| estimate_v_bridges(black_box(&data), &policy, &settings).unwrap())
    });
    g.finish();
}

criterion_group!(benches, kernels, npiv, simulation, pipeline);
criterion_main!(benches);
