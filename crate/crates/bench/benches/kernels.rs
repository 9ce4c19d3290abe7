use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nuisance_bench::{blobs, expreg_samples, garch_series};
use nuisance_core::expreg::{self, FimMethod};
use nuisance_core::garch::{self, PipelineOptions};
use nuisance_core::harness::{self, ExpRegCoverageConfig};
use nuisance_core::mlp::{self, MlpSpec, NetParams};
use nuisance_core::numcore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn expreg_benches(c: &mut Criterion) {
    let (a, b) = expreg_samples(1000, 50, 1);
    c.bench_function("expreg/scenario_covariances", |bch| {
        bch.iter(|| expreg::scenario_covariances(black_box(&a), black_box(&b), FimMethod::OuterProduct).unwrap())
    });
    let cfg = ExpRegCoverageConfig {
        replications: 20,
        workers: Some(1),
        ..Default::default()
    };
    c.bench_function("expreg/coverage_20_reps", |bch| bch.iter(|| harness::run_expreg_coverage(black_box(&cfg)).unwrap()));
}

fn garch_benches(c: &mut Criterion) {
    let y1 = garch_series(1000, 2);
    let y2 = garch_series(1000, 3);
    c.bench_function("garch/score_full", |bch| {
        bch.iter(|| garch::score_full(black_box(&y1), &Default::default()).unwrap())
    });
    let opts = PipelineOptions {
        omega_override: Some(0.095),
        ..Default::default()
    };
    c.bench_function("garch/adjusted_pipeline", |bch| {
        bch.iter(|| garch::adjusted_pipeline(black_box(&y1), black_box(&y2), &opts).unwrap())
    });
}

fn numeric_benches(c: &mut Criterion) {
    let m = numcore::Mat::from_fn(200, 200, |i, j| if i == j { 200.0 } else { 1.0 / (1.0 + (i + j) as f64) });
    let rhs = numcore::Mat::identity(200, 42);
    c.bench_function("numcore/solve_spd_200", |bch| bch.iter(|| numcore::solve_spd(black_box(&m), black_box(&rhs)).unwrap()));
}

fn mlp_benches(c: &mut Criterion) {
    let data = blobs(500, 64, 4);
    let spec = MlpSpec::uniform(64, 16, 2, 10).unwrap();
    let params = NetParams::init(&spec, &mut ChaCha8Rng::seed_from_u64(5));
    c.bench_function("mlp/weight_fim_500", |bch| bch.iter(|| mlp::weight_fim(&spec, &params, black_box(&data)).unwrap()));
    c.bench_function("mlp/cross_jacobian_bias_500", |bch| {
        bch.iter(|| mlp::cross_jacobian_bias(&spec, &params, black_box(&data)).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = expreg_benches, garch_benches, numeric_benches, mlp_benches
}
criterion_main!(benches);
