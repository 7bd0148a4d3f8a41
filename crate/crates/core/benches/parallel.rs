//! Parallel vs sequential execution of the hot kernels.
//!
//! Both modes run in one binary; `par::set_sequential` flips the route.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fcluster_core::kmeans::{kmeans_fit, KMeansConfig};
use fcluster_core::pca::fit_pca_completed;
use fcluster_core::tsne::{initial_embedding, joint_affinities, kl_gradient};
use fcluster_core::{par, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn random(n: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn tsne(c: &mut Criterion) {
    let x = random(1000, 259, 1);
    let mut group = c.benchmark_group("tsne");
    group.sample_size(10);
    for (name, seq) in MODES {
        par::set_sequential(seq);
        group.bench_function(BenchmarkId::new("affinities", name), |b| {
            b.iter(|| joint_affinities(&x, 30.0).unwrap())
        });
        let p = joint_affinities(&x, 30.0).unwrap();
        let y = initial_embedding(1000, 0);
        group.bench_function(BenchmarkId::new("gradient", name), |b| {
            b.iter(|| kl_gradient(&p, &y, 1.0))
        });
    }
    par::set_sequential(false);
    group.finish();
}

fn kmeans(c: &mut Criterion) {
    let x = random(4000, 259, 2);
    let cfg = KMeansConfig { k: 50, restarts: 4, max_iter: 30, ..Default::default() };
    let mut group = c.benchmark_group("kmeans");
    group.sample_size(10);
    for (name, seq) in MODES {
        par::set_sequential(seq);
        group.bench_function(BenchmarkId::new("fit", name), |b| {
            b.iter(|| kmeans_fit(&x, &cfg).unwrap())
        });
    }
    par::set_sequential(false);
    group.finish();
}

fn pca(c: &mut Criterion) {
    let x = random(400, 2048, 3);
    let mut group = c.benchmark_group("pca");
    group.sample_size(10);
    for (name, seq) in MODES {
        par::set_sequential(seq);
        group.bench_function(BenchmarkId::new("fit_256", name), |b| {
            b.iter(|| fit_pca_completed(&x, 256).unwrap())
        });
        let model = fit_pca_completed(&x, 256).unwrap();
        group.bench_function(BenchmarkId::new("transform", name), |b| {
            b.iter(|| model.transform(&x).unwrap())
        });
    }
    par::set_sequential(false);
    group.finish();
}

criterion_group!(benches, tsne, kmeans, pca);
criterion_main!(benches);
