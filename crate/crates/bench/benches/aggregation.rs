use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use vrk_bench::agg_case;
use vrk_core::roipool::{aggregate_accelerated, aggregate_original, pretransform};

fn aggregation(c: &mut Criterion) {
    // one RoI batch: 10 RoIs x 216 grid points, K = 16, C = 64, C' = 32
    let case = agg_case(16_000, 2160, 16, 64, 32, 3);
    let mut group = c.benchmark_group("aggregation");
    group.sample_size(20);
    group.bench_function("original", |b| {
        b.iter(|| {
            let mut macs = 0;
            black_box(aggregate_original(&case.grid, &case.groups, &case.weights, &mut macs).unwrap())
        })
    });
    group.bench_function("accelerated", |b| {
        b.iter(|| {
            let mut macs = 0;
            let pre = pretransform(&case.grid, &case.weights, &mut macs).unwrap();
            black_box(aggregate_accelerated(&case.grid, &pre, &case.groups, &case.weights, &mut macs).unwrap())
        })
    });
    group.finish();
}

criterion_group!(benches, aggregation);
criterion_main!(benches);
