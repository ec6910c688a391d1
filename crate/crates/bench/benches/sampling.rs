use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use gctuner::{random_batch, ConditionSpec, CopulaModel};
use gctuner_bench::{bench_dataset, bench_model, bench_space};

fn fit(c: &mut Criterion) {
    let space = bench_space();
    let ds = bench_dataset(&space, 600).quantile_filter(0.3).unwrap();
    c.bench_function("fit_180_rows", |b| {
        b.iter(|| black_box(CopulaModel::fit_seeded(&ds, Some(0.3), 7).unwrap()))
    });
}

fn unique_samples(c: &mut Criterion) {
    let space = bench_space();
    let model = bench_model(&space);
    let cond = ConditionSpec::new(&space, 50.0).unwrap();
    let mut group = c.benchmark_group("1000_unique_samples");
    group.bench_function(BenchmarkId::new("sampler", "gc"), |b| {
        b.iter(|| black_box(model.sample(Some(&cond), 1000, 11, None).unwrap()))
    });
    group.bench_function(BenchmarkId::new("sampler", "random"), |b| {
        b.iter(|| black_box(random_batch(&space, 1000, 11, None).unwrap()))
    });
    group.finish();
}

fn support_estimate(c: &mut Criterion) {
    let space = bench_space();
    let model = bench_model(&space);
    let cond = ConditionSpec::new(&space, 50.0).unwrap();
    c.bench_function("estimate_unique_10k_trials", |b| {
        b.iter(|| black_box(model.estimate_unique(Some(&cond), 10_000, 3).unwrap()))
    });
}

criterion_group!(benches, fit, unique_samples, support_estimate);
criterion_main!(benches);
