use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tps_partition::fit::{volume_control_grid_for, ChainContext, FitConfig};
use tps_partition::neural::{ShapeModel, Tensor};
use tps_partition::phantom::{generate_phantom, PhantomParams};
use tps_partition::tps::TpsSurface;
use tps_partition::voxel::{Axis, GridMeta};

fn heights(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 30.0 + ((i * 37) % 11) as f64 * 0.3)
        .collect()
}

fn tps(c: &mut Criterion) {
    let meta = GridMeta::cube(64, 1.0).unwrap();
    let mut group = c.benchmark_group("tps");
    for n in [64, 256, 1024] {
        group.bench_with_input(BenchmarkId::new("factorize", n), &n, |b, &n| {
            b.iter(|| volume_control_grid_for(&meta, Axis::Y, black_box(n)).unwrap())
        });
        let grid = volume_control_grid_for(&meta, Axis::Y, n).unwrap();
        let h = heights(n);
        group.bench_with_input(BenchmarkId::new("solve", n), &n, |b, _| {
            b.iter(|| TpsSurface::solve(grid.clone(), black_box(h.clone())).unwrap())
        });
        let s = TpsSurface::solve(grid.clone(), h).unwrap();
        group.bench_with_input(BenchmarkId::new("eval_4096", n), &n, |b, _| {
            b.iter(|| {
                let mut acc = 0.0;
                for i in 0..64 {
                    for j in 0..64 {
                        acc += s.eval([i as f64, j as f64]);
                    }
                }
                acc
            })
        });
    }
    group.finish();
}

fn chain(c: &mut Criterion) {
    let p = generate_phantom(&PhantomParams::default()).unwrap();
    let mut cae = ShapeModel::new(ShapeModel::default_spec(32, 64, 1).unwrap()).unwrap();
    cae.freeze();
    let cfg = FitConfig::default();
    let mut group = c.benchmark_group("chain");
    group.sample_size(20);
    for n in [100, 1024] {
        let grid = volume_control_grid_for(p.vertebra.meta(), Axis::Y, n).unwrap();
        let ctx = ChainContext::new(&p.vertebra, Arc::clone(&grid), &cfg).unwrap();
        let h = heights(n);
        group.bench_with_input(BenchmarkId::new("cae_loss_and_grad", n), &n, |b, _| {
            b.iter(|| ctx.cae_loss_and_grad(black_box(&h), &cae).unwrap())
        });
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let cae = ShapeModel::new(ShapeModel::default_spec(32, 64, 2).unwrap()).unwrap();
    let x = Tensor::new(
        vec![1, 32, 32, 32],
        (0..32768).map(|i| (i % 7) as f64 / 7.0).collect(),
    )
    .unwrap();
    let mut group = c.benchmark_group("autoencoder");
    group.sample_size(20);
    group.bench_function("reconstruction_loss_32", |b| {
        b.iter(|| cae.reconstruction_loss(black_box(&x)).unwrap())
    });
    group.bench_function("training_loss_32", |b| {
        b.iter(|| cae.training_loss(black_box(&x)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, tps, chain, conv);
criterion_main!(benches);
