//! Sequential schedule (one worker) against the full pool. Build with
//! `--no-default-features` to time the fallback without rayon at all.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mhattn::datagen::{dm1_sample, dm2_sample, MixtureSpec, PlantedSpec};
use mhattn::objective::risk_and_gradient;
use mhattn::par;
use mhattn::stability::stability_with_eta;
use mhattn::ModelParams;

fn threads() -> Vec<(&'static str, usize)> {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    vec![("sequential", 1), ("parallel", all)]
}

fn gradient(c: &mut Criterion) {
    let data = dm2_sample(&PlantedSpec::paper(0), 1000).unwrap();
    let th = ModelParams::zeros(16, 10, 5);
    let (_, g) = risk_and_gradient(&data, &th).unwrap();
    let mut th = th;
    th.add_scaled(-1.0, &g).unwrap();
    let mut group = c.benchmark_group("risk_and_gradient n=1000 H=16");
    for (name, n) in threads() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &n, |b, &n| {
            b.iter(|| par::with_threads(n, || risk_and_gradient(&data, &th).unwrap()))
        });
    }
    group.finish();
}

fn loo(c: &mut Criterion) {
    let (data, _, _) = dm1_sample(&MixtureSpec::paper(0), 40).unwrap();
    let th0 = ModelParams::zeros(4, 10, 4);
    let mut group = c.benchmark_group("leave-one-out n=40 K=5");
    group.sample_size(10);
    for (name, n) in threads() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &n, |b, &n| {
            b.iter(|| par::with_threads(n, || stability_with_eta(&data, &th0, 0.5, 5, 5, None, None).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, gradient, loo);
criterion_main!(benches);
