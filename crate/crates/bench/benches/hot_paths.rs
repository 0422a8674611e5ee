use can_bench::{cas_batch, random_matrix};
use can_core::clustering::spherical_kmeans;
use can_core::discrepancy::{cdd, cdd_grad};
use can_core::kernels::{kernel_matrix, kernel_matrix_grad, KernelSpec};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use std::hint::black_box;

fn kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("kernel_matrix");
    for n in [24, 48, 96] {
        let a = random_matrix(1, n, 16);
        let b = random_matrix(2, n, 16);
        let spec = KernelSpec::from_median(a.view(), b.view()).unwrap();
        let up = Array2::from_elem((n, n), 1.0 / (n * n) as f64);
        group.bench_with_input(BenchmarkId::new("value", n), &n, |bch, _| {
            bch.iter(|| kernel_matrix(&spec, black_box(a.view()), black_box(b.view())).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("grad", n), &n, |bch, _| {
            bch.iter(|| kernel_matrix_grad(&spec, black_box(a.view()), b.view(), up.view()).unwrap())
        });
    }
    group.finish();
}

fn discrepancy(c: &mut Criterion) {
    let batch = cas_batch(7, 3, 8, [16, 4]);
    let specs: Vec<KernelSpec> = (0..2)
        .map(|l| KernelSpec::from_median(batch.source_features[l].view(), batch.target_features[l].view()).unwrap())
        .collect();
    c.bench_function("cdd/3x8", |b| b.iter(|| cdd(&specs, black_box(&batch)).unwrap()));
    c.bench_function("cdd_grad/3x8", |b| b.iter(|| cdd_grad(&specs, black_box(&batch)).unwrap()));
}

fn clustering(c: &mut Criterion) {
    let x = random_matrix(3, 400, 16);
    let init = random_matrix(4, 4, 16);
    c.bench_function("spherical_kmeans/400x16", |b| {
        b.iter(|| spherical_kmeans(black_box(x.view()), init.view(), 100, 1e-6).unwrap())
    });
}

criterion_group!(benches, kernels, discrepancy, clustering);
criterion_main!(benches);
