//! Seed sweep throughput: rayon pool versus one thread.

use criterion::{criterion_group, criterion_main, Criterion};
use speclog::sim::SimOptions;
use speclog::sweep::{sweep_parallel, sweep_sequential};
use speclog::parse_scenario;

fn bench(c: &mut Criterion) {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/mixed.scn");
    let s = parse_scenario(&std::fs::read_to_string(path).unwrap()).unwrap();
    let opts = SimOptions::default();
    let mut g = c.benchmark_group("sweep-16-seeds");
    g.sample_size(10);
    g.bench_function("sequential", |b| b.iter(|| sweep_sequential(&s, 0..16, &opts)));
    g.bench_function("parallel", |b| b.iter(|| sweep_parallel(&s, 0..16, &opts)));
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
