//! Sequential vs. data-parallel rasterization.
//!
//! `cargo bench -p pgsvc-core` compares both policies; build with
//! `--no-default-features` to measure the sequential-only configuration.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pgsvc::raster::{Rasterizer, Target};
use pgsvc::{Exec, RasterImage, Splat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scene(n: usize, seed: u64) -> Vec<Splat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Splat {
            pos: [rng.gen(), rng.gen()],
            chol: [
                rng.gen_range(0.5..4.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.5..4.0),
            ],
            color: [rng.gen(), rng.gen(), rng.gen()],
            weight: rng.gen_range(0.2..1.0),
        })
        .collect()
}

fn policies() -> Vec<(&'static str, Exec)> {
    let mut p = vec![("sequential", Exec::Sequential)];
    if Exec::default().is_parallel() {
        p.push(("parallel", Exec::default()));
    }
    p
}

fn bench_render(c: &mut Criterion) {
    let mut group = c.benchmark_group("render");
    for &(size, n) in &[(128usize, 1_500usize), (256, 6_000)] {
        let splats = scene(n, 1);
        let target = Target::new(size, size);
        for (name, exec) in policies() {
            let r = Rasterizer::default().with_exec(exec);
            group.bench_with_input(BenchmarkId::new(name, format!("{size}px_{n}")), &splats, |b, s| {
                b.iter(|| r.render(black_box(s), target).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("backward");
    for &(size, n) in &[(128usize, 1_500usize), (256, 6_000)] {
        let splats = scene(n, 2);
        let target = Target::new(size, size);
        let upstream = RasterImage::filled(size, size, [1e-3, -2e-3, 5e-4]);
        for (name, exec) in policies() {
            let r = Rasterizer::default().with_exec(exec);
            group.bench_with_input(BenchmarkId::new(name, format!("{size}px_{n}")), &splats, |b, s| {
                b.iter(|| r.backward(black_box(s), target, &upstream).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_render, bench_backward);
criterion_main!(benches);
