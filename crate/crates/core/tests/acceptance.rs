//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use inmass_core::casestudy;
use inmass_core::data::{Arm, Dataset, Source, SubjectRecord};
use inmass_core::density_ratio::{compute_weights, fit_membership, FeatureMap, FitOptions};
use inmass_core::reconstruct::{self, ReconstructionConfig};
use inmass_core::rng;
use inmass_core::simulate::{self, Allocation, CellResult, ModelSpec, ScenarioConfig};
use inmass_core::wls::{self, Meat, RegressionModel};
use inmass_core::Borrow;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

const SEED: u64 = 20240601;

fn cell(cfg: ScenarioConfig) -> (CellResult, Duration) {
    let t = Instant::now();
    let c = simulate::run_cell(&cfg).expect("valid cell");
    (c, t.elapsed())
}

fn cell_a(reps: usize) -> ScenarioConfig {
    ScenarioConfig {
        k: 10,
        n: 100,
        allocation: Allocation::OneToOne,
        model_spec: ModelSpec::Identified,
        borrow: Borrow::BothArms,
        replications: reps,
        base_seed: SEED,
        ..Default::default()
    }
}

fn cell_b(reps: usize) -> ScenarioConfig {
    ScenarioConfig {
        allocation: Allocation::ThreeToOne,
        model_spec: ModelSpec::Misidentified,
        borrow: Borrow::ControlOnly,
        ..cell_a(reps)
    }
}

fn c1_case_study_meta() -> Verdict {
    let t = Instant::now();
    let (design, fit) = casestudy::meta_stage().expect("meta stage");
    let elapsed = t.elapsed();
    let beta_ref = [-3.62, 1.42, 0.01];
    let se_ref = [16.45, 2.35, 0.31];
    let se: Vec<f64> = (0..3).map(|j| fit.cov_beta[j][j].sqrt()).collect();
    let beta_ok = fit.beta.iter().zip(beta_ref).all(|(b, r)| (b - r).abs() <= 0.10);
    let se_ok = se.iter().zip(se_ref).all(|(s, r)| ((s - r) / r).abs() <= 0.10);
    let tau_ok = (fit.tau2 - 10.92).abs() <= 1.0;
    let time_ok = elapsed < Duration::from_secs(1);
    let mut detail = format!(
        "beta=({:.3}, {:.3}, {:.4}) se=({:.2}, {:.3}, {:.4}) tau2={:.3} in {:.3}s",
        fit.beta[0], fit.beta[1], fit.beta[2], se[0], se[1], se[2], fit.tau2,
        elapsed.as_secs_f64()
    );
    let pass = beta_ok && se_ok && tau_ok && time_ok;
    if !pass {
        detail.push_str("\n  derived design:\n");
        detail.push_str(&casestudy::format_design(&design));
    }
    verdict(pass, detail)
}

fn c2_moment_restoration() -> Verdict {
    let t = Instant::now();
    let (_, fit) = casestudy::meta_stage().expect("meta stage");
    let terms = fit.terms();
    let cfg = ReconstructionConfig::with_seed(SEED, Borrow::BothArms);
    let n = 100_000;
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    let mut ok = true;
    for trial in casestudy::all_summaries().unwrap() {
        for arm in &trial.arms {
            let mut big = arm.clone();
            big.n = n;
            let mut r = rng::substream(SEED, rng::arm_stream_id(&arm.trial_id, arm.arm.as_u8()));
            let recs = reconstruct::reconstruct_arm(&big, &fit, &cfg, &mut r).unwrap();
            let ys: Vec<f64> = recs.iter().map(|s| s.y).collect();
            let mean = ys.iter().sum::<f64>() / n as f64;
            let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let expected: f64 = terms.row(arm.arm, &arm.x_mean).iter().zip(&fit.beta).map(|(a, b)| a * b).sum();
            let z = (mean - expected).abs() / (arm.y_var / n as f64).sqrt();
            worst_mean = worst_mean.max(z);
            ok &= z <= 4.0;
            let ev = reconstruct::error_variance(arm, &fit, cfg.error_floor).unwrap();
            if !ev.clamped {
                let rel = (var / arm.y_var - 1.0).abs();
                worst_var = worst_var.max(rel);
                ok &= rel <= 0.03;
            }
        }
    }
    let elapsed = t.elapsed();
    verdict(
        ok && elapsed < Duration::from_secs(5),
        format!(
            "worst |mean dev| = {worst_mean:.2} SE (limit 4), worst variance error = {:.2}% (limit 3%), {:.2}s",
            100.0 * worst_var,
            elapsed.as_secs_f64()
        ),
    )
}

fn c3_degenerate_weights() -> Verdict {
    let mut r = rng::substream(SEED, 3);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut subjects = Vec::new();
        for i in 0..r.random_range(6..40) {
            let z = if i % 2 == 0 { Arm::Treatment } else { Arm::Control };
            subjects.push(SubjectRecord::target("T", z, 3.0 * normal.sample(&mut r) + 1.0, vec![normal.sample(&mut r)]));
        }
        for i in 0..r.random_range(10..200) {
            let z = if i % 3 == 0 { Arm::Treatment } else { Arm::Control };
            subjects.push(SubjectRecord {
                weight: 0.0,
                source: Source::Reconstructed,
                ..SubjectRecord::target("S", z, 10.0 * normal.sample(&mut r), vec![normal.sample(&mut r)])
            });
        }
        let d = Dataset::new("T", 1, subjects);
        let a = wls::estimate_univariate(&d).unwrap();
        let b = wls::estimate_univariate(&d.target_only()).unwrap();
        worst = worst
            .max(((a.delta_r - b.delta_r) / b.delta_r).abs())
            .max((a.var_r / b.var_r - 1.0).abs());
    }
    verdict(worst <= 1e-12, format!("max relative difference {worst:.2e} over 20 datasets (limit 1e-12)"))
}

fn c4_weight_calibration() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut fits = 0;
    for s in 0..10u64 {
        let mut r = rng::substream(SEED, 400 + s);
        let n_t = r.random_range(50..400);
        let n_s = r.random_range(200..2000);
        let shift: f64 = r.random_range(-1.5..1.5);
        let mut subjects = Vec::new();
        let nt = Normal::new(0.0, 1.0).unwrap();
        let ns = Normal::new(shift, 1.3).unwrap();
        for _ in 0..n_t {
            subjects.push(SubjectRecord::target("T", Arm::Treatment, 0.0, vec![nt.sample(&mut r)]));
        }
        for _ in 0..n_s {
            subjects.push(SubjectRecord {
                source: Source::Reconstructed,
                ..SubjectRecord::target("S", Arm::Control, 0.0, vec![ns.sample(&mut r)])
            });
        }
        let d = Dataset::new("T", 1, subjects);
        let fit = fit_membership(&d, &FeatureMap::quadratic(1), &FitOptions::default()).unwrap();
        if !fit.converged || fit.ridge_lambda > 0.0 {
            continue;
        }
        fits += 1;
        let w = compute_weights(&d, &fit, false).unwrap();
        let mean = w.weights().iter().sum::<f64>() / w.len() as f64;
        worst = worst.max((mean - 1.0).abs());
    }
    verdict(
        fits >= 8 && worst <= 1e-6,
        format!("{fits} unpenalized fits, max |mean weight - 1| = {worst:.2e} (limit 1e-6)"),
    )
}

fn c5_mse_dominance() -> Verdict {
    let (c, el) = cell(cell_a(500));
    let (mi, mt) = (c.mse_inmass(), c.mse_target());
    verdict(
        mi < 0.5 * mt && c.failures() == 0,
        format!(
            "{}: mse_inmass={mi:.4} mse_target={mt:.4} ratio={:.3} (limit 0.5), failures={}, {:.1}s on {} thread(s)",
            c.scenario,
            mi / mt,
            c.failures(),
            el.as_secs_f64(),
            rayon::current_num_threads()
        ),
    )
}

fn c6_type1(a: &CellResult, b: &CellResult) -> Verdict {
    let band = |t: f64| (0.02..=0.07).contains(&t);
    verdict(
        band(a.type1()) && band(b.type1()),
        format!(
            "{}: type1={:.3}; {}: type1={:.3} (band [0.02, 0.07])",
            a.scenario,
            a.type1(),
            b.scenario,
            b.type1()
        ),
    )
}

fn c7_consistency() -> Verdict {
    let (c, el) = cell(ScenarioConfig { k: 30, ..cell_a(1000) });
    let uni = c.estimator("inmass_univariate").unwrap();
    let reg = c.estimator("inmass").unwrap();
    verdict(
        (uni.mean - 2.0).abs() < 0.03 && uni.failures == 0,
        format!(
            "{}: mean weighted difference = {:.4} (limit |.-2| < 0.03); regression mean = {:.4}; {:.1}s",
            c.scenario,
            uni.mean,
            reg.mean,
            el.as_secs_f64()
        ),
    )
}

fn c8_coverage(a: &CellResult) -> Verdict {
    let e = a.estimator("inmass").unwrap();
    verdict(
        (0.93..=0.97).contains(&e.coverage),
        format!(
            "{}: coverage={:.3} (band [0.93, 0.97]); mean SE {:.4} vs empirical SD {:.4}",
            a.scenario, e.coverage, e.mean_se, e.empirical_sd
        ),
    )
}

fn c9_single_cell_csv() -> Verdict {
    let cfg = ScenarioConfig {
        k: 5,
        n: 20,
        covariate_dist: simulate::CovariateDist::Chisq2,
        replications: 20,
        base_seed: SEED,
        ..Default::default()
    };
    let render = || {
        let c = simulate::run_cell(&cfg).unwrap();
        let mut buf = Vec::new();
        simulate::write_cell_csv(&mut buf, &[c]).unwrap();
        String::from_utf8(buf).unwrap()
    };
    let a = render();
    let b = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(render);
    let header_ok = a.lines().next() == Some("scenario,estimator,metric,delta0,value");
    let power_rows = a.lines().filter(|l| l.contains(",inmass,power,")).count();
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap_or_default();
    let profile = readme.to_lowercase().contains("overnight");
    verdict(
        a == b && header_ok && power_rows == 21 && profile,
        format!(
            "identical CSV across thread counts: {}, schema ok: {header_ok}, power rows: {power_rows}, overnight profile documented: {profile}",
            a == b
        ),
    )
}

fn c10_oracles() -> Verdict {
    let mut r = rng::substream(SEED, 10);
    let mut worst_ols: f64 = 0.0;
    for _ in 0..20 {
        let n = r.random_range(8..40);
        let p = r.random_range(1..4);
        let model = RegressionModel::CovariatesInteraction;
        let subjects: Vec<SubjectRecord> = (0..n)
            .map(|i| {
                let z = if i % 2 == 0 { Arm::Treatment } else { Arm::Control };
                let x: Vec<f64> = (0..p).map(|_| r.random_range(-2.0..2.0)).collect();
                SubjectRecord::target("T", z, r.random_range(-5.0..5.0), x)
            })
            .collect();
        let d = Dataset::new("T", p, subjects);
        let fit = wls::fit_weighted_regression(&d, model, Meat::W4).unwrap();
        let q = model.column_names(p).len();
        let x = DMatrix::from_fn(n, q, |i, j| model.row(d.subjects[i].z, &d.subjects[i].x)[j]);
        let y = DVector::from_iterator(n, d.subjects.iter().map(|s| s.y));
        let b = x.svd(true, true).solve(&y, 1e-14).unwrap();
        for (u, v) in fit.beta.iter().zip(b.iter()) {
            worst_ols = worst_ols.max((u - v).abs());
        }
    }

    let (n_t, n_s, shift) = (5000usize, 10000usize, 1.0);
    let mut r = rng::substream(SEED, 11);
    let std = Normal::new(0.0, 1.0).unwrap();
    let mut subjects = Vec::new();
    for _ in 0..n_t {
        subjects.push(SubjectRecord::target("T", Arm::Treatment, 0.0, vec![std.sample(&mut r)]));
    }
    for _ in 0..n_s {
        subjects.push(SubjectRecord {
            source: Source::Reconstructed,
            ..SubjectRecord::target("S", Arm::Control, 0.0, vec![shift + std.sample(&mut r)])
        });
    }
    let d = Dataset::new("T", 1, subjects);
    let fit = fit_membership(&d, &FeatureMap::quadratic(1), &FitOptions::default()).unwrap();
    let w = compute_weights(&d, &fit, false).unwrap();
    let n = (n_t + n_s) as f64;
    let phi = |x: f64, m: f64| (-0.5 * (x - m) * (x - m)).exp();
    let rms = (w
        .subjects
        .iter()
        .map(|s| {
            let x = s.x[0];
            let truth = n * phi(x, 0.0) / (n_t as f64 * phi(x, 0.0) + n_s as f64 * phi(x, shift));
            (s.weight.ln() - truth.ln()).powi(2)
        })
        .sum::<f64>()
        / n)
        .sqrt();
    verdict(
        worst_ols <= 1e-10 && rms < 0.1,
        format!("max |WLS - OLS| = {worst_ols:.2e} (limit 1e-10); log density-ratio RMS error = {rms:.4} (limit 0.1)"),
    )
}

fn run(name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let t = Instant::now();
    let v = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    println!(
        "[{}] {name} ({:.1}s): {}",
        if v.pass { "PASS" } else { "FAIL" },
        t.elapsed().as_secs_f64(),
        v.detail
    );
    v.pass
}

fn main() {
    // Shared by the type-I error and coverage criteria.
    let a = cell(cell_a(1000)).0;
    let b = cell(cell_b(1000)).0;
    let results = [
        run("C1 case-study meta-regression", c1_case_study_meta),
        run("C2 moment restoration", c2_moment_restoration),
        run("C3 degenerate-weight identity", c3_degenerate_weights),
        run("C4 weight calibration", c4_weight_calibration),
        run("C5 MSE dominance", c5_mse_dominance),
        run("C6 type-I error", || c6_type1(&a, &b)),
        run("C7 consistency", c7_consistency),
        run("C8 coverage", || c8_coverage(&a)),
        run("C9 single-cell CSV reproduction", c9_single_cell_csv),
        run("C10 oracle equivalence", c10_oracles),
    ];
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
