//! Sequential versus data-parallel replication loop and robust penalty draws.

use attrition_pqr::dgp::{generate_replication, DesignConfig, DesignId};
use attrition_pqr::estimators::EstimatorKind;
use attrition_pqr::lambda::{robust_lambda, RobustParams};
use attrition_pqr::mc::{run_mc, McArm, Scenario};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn workers() -> [(&'static str, Option<usize>); 2] {
    [("sequential", Some(1)), ("parallel", None)]
}

fn replications(c: &mut Criterion) {
    let sc = [Scenario::Design(DesignConfig::preset(DesignId::D3, 200, 5, 1).unwrap())];
    let arms = [
        McArm::benchmark(EstimatorKind::Fe, 0.5),
        McArm::benchmark(EstimatorKind::Wpqr, 0.5),
    ];
    let mut g = c.benchmark_group("run_mc_d3_16reps");
    g.sample_size(10);
    for (name, w) in workers() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_mc(&sc, &arms, 16, 1, w).unwrap())
        });
    }
    g.finish();
}

fn robust_draws(c: &mut Criterion) {
    let cfg = DesignConfig::preset(DesignId::D3, 500, 5, 1).unwrap();
    let ds = generate_replication(&cfg, 0).unwrap().dataset;
    let params = RobustParams { draws: 500, ..Default::default() };
    let mut g = c.benchmark_group("robust_lambda_500_draws");
    g.sample_size(10);
    for (name, w) in workers() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| robust_lambda(&ds, None, 0.5, params, 3, w).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, replications, robust_draws);
criterion_main!(benches);
