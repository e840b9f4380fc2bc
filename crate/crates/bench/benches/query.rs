use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use vrk_bench::query_points;
use vrk_core::vquery::{ball_query_oracle, random_grid, VoxelQuery};
use vrk_core::QuerySpec;

fn query_scaling(c: &mut Criterion) {
    let spec = QuerySpec::new(4, 16).unwrap();
    let vq = VoxelQuery::new(4);
    let mut group = c.benchmark_group("query");
    for n in [10_000usize, 100_000] {
        let grid = random_grid(n, 0.03, 1, 1).unwrap();
        let points = query_points(&grid, 256, 2);
        let radius = 4.0 * grid.cell_size()[0];
        group.bench_with_input(BenchmarkId::new("voxel_query", n), &n, |b, _| {
            let mut i = 0;
            b.iter(|| {
                i = (i + 1) % points.len();
                black_box(vq.query(&grid, points[i], &spec).unwrap().len())
            })
        });
        group.bench_with_input(BenchmarkId::new("ball_query", n), &n, |b, _| {
            let mut i = 0;
            b.iter(|| {
                i = (i + 1) % points.len();
                black_box(ball_query_oracle(&grid, points[i], radius, 16).len())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, query_scaling);
criterion_main!(benches);
