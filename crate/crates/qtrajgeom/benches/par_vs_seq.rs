// Ensemble and phase-family throughput, data-parallel backend vs a forced
// single-thread pool. Building with --no-default-features routes everything
// through the plain sequential map instead; outputs are identical either
// way, only the wall time moves.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::f64::consts::PI;
use std::hint::black_box;

use qtrajgeom::engine::run_ensemble;
use qtrajgeom::geometry::{phase_family, InitRule, RecordRule};
use qtrajgeom::{BlochState, MeasurementProtocol};

fn ensemble_once() {
    let protocol = MeasurementProtocol::gaussian(PI / 2.0, 0.1, 200);
    let init = BlochState::new(PI / 2.0, -(0.2 * PI).atan());
    let summary = run_ensemble(&protocol, &init, 256, 11, 0.1).unwrap();
    black_box(summary.phi_final.len());
}

fn family_once() {
    let fam = phase_family(0.1, 33, 200, 2, InitRule::OnAxis, RecordRule::Greedy).unwrap();
    black_box(fam.chi_g.len());
}

#[cfg(feature = "parallel")]
fn with_threads(n: usize, f: impl Fn() + Sync + Send) {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .unwrap()
        .install(f);
}

#[cfg(not(feature = "parallel"))]
fn with_threads(_n: usize, f: impl Fn() + Sync + Send) {
    f();
}

fn backends(c: &mut Criterion) {
    let threads = std::thread::available_parallelism().map_or(2, |n| n.get());
    let mut group = c.benchmark_group("ensemble_256x200");
    group.sample_size(20);
    group.bench_function(BenchmarkId::new("threads", 1), |b| {
        b.iter(|| with_threads(1, ensemble_once))
    });
    group.bench_function(BenchmarkId::new("threads", threads), |b| {
        b.iter(|| with_threads(threads, ensemble_once))
    });
    group.finish();

    let mut group = c.benchmark_group("phase_family_33x200");
    group.sample_size(20);
    group.bench_function(BenchmarkId::new("threads", 1), |b| {
        b.iter(|| with_threads(1, family_once))
    });
    group.bench_function(BenchmarkId::new("threads", threads), |b| {
        b.iter(|| with_threads(threads, family_once))
    });
    group.finish();
}

criterion_group!(benches, backends);
criterion_main!(benches);
