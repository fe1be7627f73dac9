use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use sae_bench::gaussian;
use sae_core::activations::{softmax, topk};
use sae_core::{sparsemax, sparsemax_vjp};

fn bench_sparsemax(c: &mut Criterion) {
    let mut group = c.benchmark_group("sparsemax");
    for m in [16, 128, 1024, 4096] {
        let z = gaussian(1, m, 1).into_vec();
        let u = gaussian(1, m, 2).into_vec();
        group.throughput(Throughput::Elements(m as u64));
        group.bench_with_input(BenchmarkId::new("forward", m), &z, |b, z| {
            b.iter(|| sparsemax(black_box(z)).unwrap())
        });
        let code = sparsemax(&z).unwrap();
        group.bench_with_input(BenchmarkId::new("vjp", m), &u, |b, u| {
            b.iter(|| sparsemax_vjp(&code, black_box(u)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("softmax", m), &z, |b, z| {
            b.iter(|| softmax(black_box(z)))
        });
        group.bench_with_input(BenchmarkId::new("topk32", m), &z, |b, z| {
            b.iter(|| topk(black_box(z), 32.min(m)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_sparsemax);
criterion_main!(benches);
