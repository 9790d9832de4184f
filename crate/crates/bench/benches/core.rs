use std::hint::black_box;

use asif_core::matching::greedy_match;
use asif_core::population::synthetic;
use asif_core::rng;
use asif_core::{coverage, CoverageMode, Design, DesignMap, Estimator, Statistic};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

fn enumeration(c: &mut Criterion) {
    let mut g = c.benchmark_group("enumerate");
    for n in [12, 16] {
        g.bench_function(format!("bernoulli_truncated_{n}"), |b| {
            b.iter_batched(
                || Design::bernoulli_truncated(n, 0.5).unwrap(),
                |d| black_box(d.enumerate().unwrap().len()),
                BatchSize::SmallInput,
            )
        });
    }
    g.bench_function("crd_16_8", |b| {
        b.iter_batched(
            || Design::completely_randomized(16, 8).unwrap(),
            |d| black_box(d.enumerate().unwrap().len()),
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

fn exact_coverage(c: &mut Criterion) {
    let pop = synthetic::heterogeneous(12, 1.0, 0.5, 1).unwrap();
    let eta0 = Design::bernoulli_truncated(12, 0.5).unwrap();
    eta0.enumerate().unwrap();
    let mut g = c.benchmark_group("coverage");
    g.sample_size(20);
    g.bench_function("constant_map_n12", |b| {
        let map = DesignMap::constant(eta0.clone());
        b.iter(|| {
            coverage(
                &eta0,
                &map,
                &Estimator::DiffInMeans,
                &pop,
                0.025,
                Some(&Statistic::TreatedCount),
                CoverageMode::Exact,
            )
            .unwrap()
        })
    });
    g.bench_function("conditional_map_n12", |b| {
        b.iter(|| {
            let map = DesignMap::conditional(eta0.clone(), Statistic::TreatedCount);
            coverage(
                &eta0,
                &map,
                &Estimator::DiffInMeans,
                &pop,
                0.025,
                None,
                CoverageMode::Exact,
            )
            .unwrap()
        })
    });
    let pop100 = synthetic::constant_effect(100, 0.0, 1).unwrap();
    let crd = Design::completely_randomized(100, 50).unwrap();
    g.bench_function("mc_constant_map_n100", |b| {
        let map = DesignMap::constant(crd.clone());
        b.iter(|| {
            let mode = CoverageMode::MonteCarlo {
                outer: 2000,
                inner: Some(2000),
                seed: 1,
            };
            coverage(
                &crd,
                &map,
                &Estimator::DiffInMeans,
                &pop100,
                0.025,
                None,
                mode,
            )
            .unwrap()
        })
    });
    g.finish();
}

fn matching(c: &mut Criterion) {
    let mut g = c.benchmark_group("greedy_match");
    for n in [10, 100, 1000] {
        let pop = synthetic::covariate_linked(n, 3, 1.0, 2).unwrap();
        let x = pop.covariates().unwrap().clone();
        let design = Design::bernoulli_truncated(n, 0.3).unwrap();
        let z = design.sample(&mut rng::stream(3, &[0]));
        g.bench_function(format!("n{n}"), |b| {
            b.iter(|| greedy_match(black_box(&z), &x).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, enumeration, exact_coverage, matching);
criterion_main!(benches);
