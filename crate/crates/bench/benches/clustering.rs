use criterion::{criterion_group, criterion_main, Criterion};
use moce_bench::blob_points;
use moce_core::clustering::{elbow_select, kmeans_fit, KMeansOptions};

fn kmeans(c: &mut Criterion) {
    let points = blob_points(4, 500, 64);
    c.bench_function("kmeans/k4/n2000/d64", |b| {
        b.iter(|| kmeans_fit(&points, 4, 1, KMeansOptions::default()).unwrap())
    });
    let small = blob_points(3, 100, 64);
    c.bench_function("elbow/kmax8/n300/d64", |b| {
        b.iter(|| elbow_select(&small, 8, 1).unwrap())
    });
}

criterion_group!(benches, kmeans);
criterion_main!(benches);
