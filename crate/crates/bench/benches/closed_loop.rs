use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use eipnet::{integrate, Method, SimConfig};
use eipnet_bench::split_network;

fn rhs(c: &mut Criterion) {
    let mut group = c.benchmark_group("closed_loop_rhs");
    for n in [10, 100] {
        let (net, _) = split_network(n, 1);
        let mut state = net.initial_state();
        for (k, v) in state.iter_mut().enumerate() {
            *v = 0.01 * (k % 7) as f64;
        }
        group.bench_with_input(BenchmarkId::from_parameter(n), &state, |b, s| {
            b.iter(|| net.closed_loop_rhs(black_box(s)).unwrap())
        });
    }
    group.finish();
}

fn short_run(c: &mut Criterion) {
    let (net, _) = split_network(20, 1);
    let cfg = SimConfig {
        t_end: 1.0,
        dt: 1e-3,
        method: Method::Rk4,
        record_every: 100,
        seed: 0,
    };
    c.bench_function("integrate_n20_1s", |b| b.iter(|| integrate(black_box(&net), &cfg, &[]).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = rhs, short_run
}
criterion_main!(benches);
