use std::hint::black_box;

use bxl1_bench::{gradient, instance};
use bxl1_core::geometry::{
    approx_project, project_box_l1, sparse_sign_step, steepest_descent_direction,
};
use bxl1_core::oracles::dykstra_project;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

const DIMS: [usize; 4] = [1 << 10, 1 << 14, 1 << 17, 1 << 20];

fn projections(c: &mut Criterion) {
    let mut group = c.benchmark_group("projection");
    group.sample_size(20);
    for d in DIMS {
        let (tm, u) = instance(d, 12.0, 1);
        group.throughput(Throughput::Elements(d as u64));
        group.bench_with_input(BenchmarkId::new("exact", d), &u, |b, u| {
            b.iter(|| project_box_l1(black_box(u), &tm))
        });
        group.bench_with_input(BenchmarkId::new("approximate", d), &u, |b, u| {
            b.iter(|| approx_project(black_box(u), &tm))
        });
    }
    group.finish();
}

fn dykstra(c: &mut Criterion) {
    let (tm, u) = instance(1 << 10, 12.0, 2);
    c.bench_function("dykstra/1024", |b| {
        b.iter(|| dykstra_project(black_box(&u), &tm, 1e-12, 50_000))
    });
}

fn steps(c: &mut Criterion) {
    let mut group = c.benchmark_group("step");
    group.sample_size(20);
    for d in DIMS {
        let (tm, _) = instance(d, 12.0, 3);
        let w = gradient(d, 4);
        group.throughput(Throughput::Elements(d as u64));
        group.bench_with_input(BenchmarkId::new("steepest", d), &w, |b, w| {
            b.iter(|| steepest_descent_direction(black_box(w), &tm))
        });
        group.bench_with_input(BenchmarkId::new("sparse_sign", d), &w, |b, w| {
            b.iter(|| sparse_sign_step(black_box(w), (d / 20).max(1)))
        });
    }
    group.finish();
}

criterion_group!(benches, projections, dykstra, steps);
criterion_main!(benches);
