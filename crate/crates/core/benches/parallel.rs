//! Sequential versus data-parallel throughput of the hot loops.
//!
//! Each workload runs once inside a one-thread rayon pool (the sequential
//! baseline) and once on the default pool. Building without the `parallel`
//! feature makes both variants run the plain-iterator fallback.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use marglik::extreme::enumerate_extremes;
use marglik::likelihood::{inverse_link, EIDataset};
use marglik::scan::{scan, ScanOptions};
use marglik::simulate::{simulate, table3_pi};
use marglik::tables::MarginPair;
use rayon::{ThreadPool, ThreadPoolBuilder};

fn pools() -> Vec<(&'static str, ThreadPool)> {
    vec![
        (
            "sequential",
            ThreadPoolBuilder::new().num_threads(1).build().unwrap(),
        ),
        ("parallel", ThreadPoolBuilder::new().build().unwrap()),
    ]
}

fn dataset_evaluation(c: &mut Criterion) {
    let data = simulate(&table3_pi(), 60, 40, 1)
        .dataset()
        .and_then(EIDataset::enumerated)
        .unwrap();
    let params = inverse_link(&table3_pi()).unwrap();
    let mut group = c.benchmark_group("dataset_evaluate");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            pool.install(|| b.iter(|| black_box(data.evaluate(&params).unwrap())))
        });
    }
    group.finish();
}

fn example_scan(c: &mut Criterion) {
    let margins: MarginPair = "8,20,12/12,7,21".parse().unwrap();
    let opts = ScanOptions::default();
    let mut group = c.benchmark_group("scan_2160");
    group.sample_size(20);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            pool.install(|| b.iter(|| black_box(scan(&margins, &opts).unwrap())))
        });
    }
    group.finish();
}

fn extremes_4x4(c: &mut Criterion) {
    let margins: MarginPair = "44,37,57,62/57,58,42,43".parse().unwrap();
    let mut group = c.benchmark_group("extremes_4x4");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            pool.install(|| b.iter(|| black_box(enumerate_extremes(&margins, None).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, dataset_evaluation, example_scan, extremes_4x4);
criterion_main!(benches);
