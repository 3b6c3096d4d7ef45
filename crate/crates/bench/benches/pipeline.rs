use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use elanova::bandwidth::{cv_bandwidth, default_grid};
use elanova::bootstrap::BootstrapPlan;
use elanova::covariate::{anova_beta_test, CovariateConfig};
use elanova::el::solve_lambda;
use elanova::kernel::Kernel;
use elanova::time_effect::{integrated_statistic, TimeEffectFit};
use elanova::{BootstrapConfig, IntegratedStatConfig, WeightFn};
use elanova_bench::{moments, three_arm_study};

fn el_solve(c: &mut Criterion) {
    let mut group = c.benchmark_group("el_solve");
    for r in [1, 3, 6] {
        let z = moments(300, r, 1);
        group.bench_with_input(BenchmarkId::from_parameter(r), &z, |b, z| {
            b.iter(|| solve_lambda(black_box(z), r))
        });
    }
    group.finish();
}

fn beta_profile(c: &mut Criterion) {
    let study = three_arm_study(5);
    let cfg = CovariateConfig::default();
    c.bench_function("beta_test_t5", |b| {
        b.iter(|| anova_beta_test(black_box(&study), &cfg).unwrap())
    });
}

fn bandwidth_cv(c: &mut Criterion) {
    let study = three_arm_study(5);
    let frame = study.frames().swap_remove(0);
    let grid = default_grid(&frame);
    let mut group = c.benchmark_group("cv_bandwidth");
    group.sample_size(10);
    group.bench_function("one_arm_default_grid", |b| {
        b.iter(|| cv_bandwidth(black_box(&frame), Kernel::Epanechnikov, &grid).unwrap())
    });
    group.finish();
}

fn time_curve(c: &mut Criterion) {
    let study = three_arm_study(5);
    let cfg = IntegratedStatConfig {
        weight_fn: WeightFn::PooledTimeKde,
        ..Default::default()
    };
    let fit = TimeEffectFit::new(&study, &cfg).unwrap();
    c.bench_function("integrated_statistic", |b| {
        b.iter(|| integrated_statistic(black_box(&fit), &cfg).unwrap())
    });
    let plan = BootstrapPlan::new(&study, &fit, &cfg, &BootstrapConfig::default()).unwrap();
    let mut g = c.benchmark_group("bootstrap");
    g.sample_size(20);
    g.bench_function("one_replicate", |b| {
        let mut k = 0;
        b.iter(|| {
            k += 1;
            plan.replicate(9, k).ok()
        })
    });
    g.finish();
}

criterion_group!(benches, el_solve, beta_profile, bandwidth_cv, time_curve);
criterion_main!(benches);
