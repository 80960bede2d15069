use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use inmass_core::density_ratio::{self, FeatureMap, FitOptions};
use inmass_core::meta::{self, MetaTerms};
use inmass_core::pipeline;
use inmass_core::reconstruct::{Borrow, ReconstructionConfig};
use inmass_core::rng::substream;
use inmass_core::simulate::{self, CovariateDist, ScenarioConfig};
use inmass_core::wls::{self, Meat, RegressionModel};
use inmass_core::{Dataset, TrialSummary};

const K: usize = 10;
const N: usize = 100;

fn inputs() -> (Dataset, Vec<TrialSummary>) {
    let mut rng = substream(42, 0);
    let trials = (1..=K)
        .map(|k| simulate::generate_meta_trial(k, K, N, CovariateDist::Normal, &mut rng).1)
        .collect();
    let target = simulate::generate_target_trial(N, Default::default(), CovariateDist::Normal, &mut rng);
    (target, trials)
}

fn stages(c: &mut Criterion) {
    let (target, trials) = inputs();
    let terms = MetaTerms::with_interactions(1);
    let design = meta::build_design(&trials, &terms).unwrap();
    c.bench_function("meta_fit_dl_K10", |b| b.iter(|| meta::fit_dl(black_box(&design)).unwrap()));

    let fit = meta::fit_dl(&design).unwrap();
    let recon = ReconstructionConfig::with_seed(7, Borrow::BothArms);
    c.bench_function("reconstruct_and_pool", |b| {
        b.iter(|| pipeline::pool(black_box(&target), &trials, &fit, &recon).unwrap())
    });

    let pooled = pipeline::pool(&target, &trials, &fit, &recon).unwrap();
    let features = FeatureMap::quadratic(1);
    let opts = FitOptions::default();
    c.bench_function("membership_logistic", |b| {
        b.iter(|| density_ratio::fit_membership(black_box(&pooled), &features, &opts).unwrap())
    });

    let logistic = density_ratio::fit_membership(&pooled, &features, &opts).unwrap();
    let weighted = density_ratio::compute_weights(&pooled, &logistic, false).unwrap();
    c.bench_function("weighted_regression_interaction", |b| {
        b.iter(|| {
            wls::fit_weighted_regression(black_box(&weighted), RegressionModel::CovariatesInteraction, Meat::W4)
                .unwrap()
        })
    });
}

fn replication(c: &mut Criterion) {
    let cfg = ScenarioConfig::default();
    let mut g = c.benchmark_group("simulation");
    g.sample_size(20);
    g.bench_function("replication_K10_n100", |b| {
        b.iter(|| simulate::run_replication(black_box(&cfg), 3))
    });
    g.finish();
}

criterion_group!(benches, stages, replication);
criterion_main!(benches);
