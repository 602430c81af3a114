use circuitforge::discovery::{discover_pairs, score_all};
use circuitforge_bench::{model, noise_images, pairs};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn scoring(c: &mut Criterion) {
    let images = noise_images(64, 1);
    let p = pairs(&images);
    let mut group = c.benchmark_group("score_all");
    group.sample_size(10);
    for width in [25, 50, 100] {
        let m = model(&[width, width], 7);
        group.bench_with_input(BenchmarkId::from_parameter(width), &m, |b, m| {
            b.iter(|| black_box(score_all(m, &p).unwrap()))
        });
    }
    group.finish();
}

fn full_discovery(c: &mut Criterion) {
    let images = noise_images(200, 2);
    let p = pairs(&images);
    let m = model(&[100, 100], 7);
    let mut group = c.benchmark_group("discover");
    group.sample_size(10);
    group.bench_function("default_spec_100_pairs", |b| b.iter(|| black_box(discover_pairs(&m, &p, 10, 1e-4).unwrap())));
    group.finish();
}

fn single_pass(c: &mut Criterion) {
    let images = noise_images(2, 3);
    let m = model(&[100, 100], 7);
    let x = images[0].pixels.as_slice();
    c.bench_function("forward_single_sample", |b| b.iter(|| black_box(m.forward(black_box(x)).unwrap())));
}

criterion_group!(benches, scoring, full_discovery, single_pass);
criterion_main!(benches);
