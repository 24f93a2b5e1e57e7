use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use obmreg_bench::random_points;
use obmreg_core::diffmath::{knn_indices, Tensor};
use obmreg_core::geometry::RigidTransform;
use obmreg_core::solver::weighted_kabsch;

fn to_tensor(points: &[obmreg_core::geometry::Vec3]) -> Tensor {
    Tensor::matrix(points.len(), 3, points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()).unwrap()
}

fn kabsch(c: &mut Criterion) {
    let mut group = c.benchmark_group("weighted_kabsch");
    let xf = RigidTransform::rot_z_deg(30.0);
    for n in [64, 256, 1024] {
        let src = random_points(n, 1);
        let dst: Vec<_> = src.iter().map(|p| xf.apply_point(p)).collect();
        let w = vec![1.0; n];
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| weighted_kabsch(black_box(&src), black_box(&dst), black_box(&w)).unwrap())
        });
    }
    group.finish();
}

fn knn(c: &mut Criterion) {
    let mut group = c.benchmark_group("knn");
    for n in [256, 1024] {
        let base = to_tensor(&random_points(n, 2));
        group.bench_with_input(BenchmarkId::new("k16", n), &n, |b, _| b.iter(|| knn_indices(black_box(&base), black_box(&base), 16).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, kabsch, knn);
criterion_main!(benches);
