use adaptive_lqr::riccati::{riccati_algebraic, riccati_ode};
use adaptive_lqr_bench::integrator_chain;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn algebraic(c: &mut Criterion) {
    let mut g = c.benchmark_group("riccati_algebraic");
    for n in [1, 2, 4, 8] {
        let r = integrator_chain(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &r, |b, r| {
            b.iter(|| riccati_algebraic(black_box(r)).unwrap())
        });
    }
    g.finish();
}

fn ode(c: &mut Criterion) {
    let r = integrator_chain(4);
    c.bench_function("riccati_ode/n4_1000_steps", |b| {
        b.iter(|| riccati_ode(black_box(&r), 1.0, 1000).unwrap())
    });
}

criterion_group!(benches, algebraic, ode);
criterion_main!(benches);
