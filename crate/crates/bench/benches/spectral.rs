use bolt_core::adapt::{train_sigma, AdamWConfig};
use bolt_core::coefficients::zero_sigmas;
use bolt_core::experiment::{build_library, PipelineConfig};
use bolt_core::spectral::{build_bases, orthogonalize, stack_directions, thin_svd, BasisConfig};
use bolt_core::taskgen::{sample_batch, TaskRef};
use bolt_core::tensor_store::apply_task_arithmetic;
use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DMatrix;
use std::hint::black_box;

fn matrix(rows: usize, cols: usize, salt: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| (((i * 131 + j * 71 + salt * 17) % 97) as f64 / 48.5) - 1.0)
}

fn bench_svd(c: &mut Criterion) {
    let mut group = c.benchmark_group("thin_svd");
    for (r, cl) in [(16, 32), (64, 64), (128, 32)] {
        let m = matrix(r, cl, 1);
        group.bench_function(format!("{r}x{cl}"), |b| b.iter(|| thin_svd(black_box(&m), None).unwrap()));
    }
    group.finish();
}

fn bench_basis(c: &mut Criterion) {
    let svds: Vec<_> = (0..8)
        .map(|t| (format!("src{t}"), thin_svd(&matrix(64, 128, t), Some(4)).unwrap()))
        .collect();
    c.bench_function("stack+orthogonalize 8x4 on 64x128", |b| {
        b.iter(|| {
            let stack = stack_directions(black_box(&svds), 4).unwrap();
            orthogonalize(&stack, 1e-8, None).unwrap()
        })
    });
}

fn bench_pipeline(c: &mut Criterion) {
    let lib = build_library(0, &PipelineConfig::default()).unwrap();
    let tvs = lib.task_vectors(8).unwrap();
    let alphas = [0.3; 8];
    c.bench_function("merge 8 task vectors", |b| {
        b.iter(|| apply_task_arithmetic(black_box(&lib.theta_0), &tvs, &alphas).unwrap())
    });

    let bases = build_bases(&tvs, &BasisConfig::default()).unwrap();
    let support = sample_batch(&lib.family, &TaskRef::Target, 128, 1).unwrap();
    let one_epoch = AdamWConfig { epochs: 1, warmup_epochs: 0, ..AdamWConfig::default() };
    let init = zero_sigmas(&bases);
    c.bench_function("train_sigma 1 epoch, 128 rows, r=8", |b| {
        b.iter(|| train_sigma(&lib.theta_0, &bases, &init, black_box(&support), &one_epoch, 0).unwrap())
    });
}

criterion_group!(benches, bench_svd, bench_basis, bench_pipeline);
criterion_main!(benches);
