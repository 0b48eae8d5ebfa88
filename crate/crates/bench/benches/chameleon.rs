use std::f64::consts::{FRAC_PI_3, FRAC_PI_4};
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use chameleon_core::analysis::{ekert_group_correlations, estimate_correlation, Estimator, DEFAULT_MIN_GROUP};
use chameleon_core::prng::hidden_state_stream;
use chameleon_core::quadrature::{correlation_change_of_variables, correlation_quadrature, uniform_grid};
use chameleon_core::station::{run_station, AnglePolicy};
use chameleon_core::{Angle, Role};

fn quadrature(c: &mut Criterion) {
    let grid = uniform_grid(16);
    c.bench_function("correlation_quadrature/16x16", |bench| {
        bench.iter(|| {
            for &a in &grid {
                for &b in &grid {
                    black_box(correlation_quadrature(a, b, 1e-9).unwrap());
                }
            }
        })
    });
    c.bench_function("correlation_change_of_variables/single", |bench| {
        bench.iter(|| correlation_change_of_variables(black_box(Angle::new(0.3)), Angle::new(2.0), 1e-7).unwrap())
    });
}

fn stations(c: &mut Criterion) {
    let mut group = c.benchmark_group("run_station");
    for n in [10_000u64, 40_000] {
        group.throughput(Throughput::Elements(n));
        let policy = AnglePolicy::Fixed { angle: Angle::new(FRAC_PI_4) };
        group.bench_with_input(BenchmarkId::new("fixed", n), &n, |bench, &n| {
            bench.iter(|| run_station(Role::One, black_box(42), n, &policy).unwrap())
        });
    }
    group.finish();
    c.bench_function("hidden_state_stream/40000", |bench| {
        bench.iter(|| hidden_state_stream(black_box(42), 40_000))
    });
}

fn analysis(c: &mut Criterion) {
    let n = 40_000;
    let fixed = |x: f64| AnglePolicy::Fixed { angle: Angle::new(x) };
    let r1 = run_station(Role::One, 42, n, &fixed(0.0)).unwrap();
    let r2 = run_station(Role::Two, 42, n, &fixed(FRAC_PI_4)).unwrap();
    let mut group = c.benchmark_group("estimate_correlation");
    group.throughput(Throughput::Elements(n));
    for estimator in [Estimator::Plain, Estimator::SelfNormalized] {
        group.bench_function(estimator.name(), |bench| {
            bench.iter(|| estimate_correlation(&r1, &r2, |_| true, estimator).unwrap())
        });
    }
    group.finish();

    let angles: Vec<Angle> = [0.0, FRAC_PI_3, 2.0 * FRAC_PI_3].map(Angle::new).to_vec();
    let random = |seed| AnglePolicy::SeededRandom { choices: angles.clone(), choice_seed: seed };
    let e1 = run_station(Role::One, 42, 90_000, &random(1)).unwrap();
    let e2 = run_station(Role::Two, 42, 90_000, &random(2)).unwrap();
    c.bench_function("ekert_group_correlations/90000", |bench| {
        bench.iter(|| ekert_group_correlations(&e1, &e2, DEFAULT_MIN_GROUP).unwrap())
    });
}

criterion_group!(benches, quadrature, stations, analysis);
criterion_main!(benches);
