use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use std::sync::Arc;
use tiltwise_core::grid::SupportGrid;
use tiltwise_core::tilt::{
    kl_derivatives, tilt_density, tilt_normalizer, ConditionalDensitySlice, TiltSpec,
};

fn slice_on(n: usize) -> ConditionalDensitySlice {
    let grid = Arc::new(SupportGrid::uniform(0.0, 1.0, n).unwrap());
    ConditionalDensitySlice::from_fn(grid, |a| 0.5 + a).unwrap()
}

fn bench_normalizer(c: &mut Criterion) {
    let mut group = c.benchmark_group("tilt_normalizer");
    for n in [200usize, 2000] {
        let slice = slice_on(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &slice, |b, s| {
            b.iter(|| tilt_normalizer(black_box(s), TiltSpec::new(4.0).unwrap()).unwrap())
        });
    }
    group.finish();
}

fn bench_tilt_density(c: &mut Criterion) {
    let mut group = c.benchmark_group("tilt_density");
    for delta in [1.0f64, 20.0, 600.0] {
        let slice = slice_on(500);
        group.bench_with_input(BenchmarkId::from_parameter(delta), &delta, |b, &d| {
            b.iter(|| tilt_density(black_box(&slice), TiltSpec::new(d).unwrap()).unwrap())
        });
    }
    group.finish();
}

fn bench_kl_derivatives(c: &mut Criterion) {
    let slice = slice_on(500);
    c.bench_function("kl_derivatives", |b| {
        b.iter(|| kl_derivatives(black_box(&slice), TiltSpec::new(2.0).unwrap()).unwrap())
    });
}

criterion_group!(
    benches,
    bench_normalizer,
    bench_tilt_density,
    bench_kl_derivatives
);
criterion_main!(benches);
