//! Monte-Carlo study of the estimator against the target-only analysis.
//!
//! Outcomes follow `Y = 1 + 2z − x + 0.5·z·x + ε`, `ε ~ N(0, 1)`. Meta trial
//! `k` of `K` has covariate mean `4(k−1)/(K−1) − 1`; the target has mean 0, so
//! the target effect is `δ_T = 2`.

use std::fmt;
use std::io::Write;

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Arm, ArmSummary, CovariateFamily, Dataset, Source, SubjectRecord, TrialSummary};
use crate::density_ratio::{FeatureMap, FitOptions};
use crate::error::{Error, Result};
use crate::meta::MetaTerms;
use crate::pipeline::{self, PipelineOptions};
use crate::reconstruct::{Borrow, ReconstructionConfig};
use crate::rng::{self, StreamRng};
use crate::wls::{self, Meat, RegressionModel};

pub const DELTA_T: f64 = 2.0;
pub const BETA0: f64 = 1.0;
pub const BETA1: f64 = -1.0;
pub const BETA2: f64 = 0.5;

pub const TARGET_ID: &str = "target";

/// Null value plus 20 steps of 0.1.
pub fn delta0_grid() -> Vec<f64> {
    (0..=20).map(|i| DELTA_T + 0.1 * i as f64).collect()
}

pub fn outcome_mean(z: Arm, x: f64) -> f64 {
    let zi = z.indicator();
    BETA0 + DELTA_T * zi + BETA1 * x + BETA2 * zi * x
}

macro_rules! str_enum {
    ($ty:ident { $($var:ident => $name:literal $(| $alias:literal)*),+ $(,)? }) => {
        impl std::str::FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
                match s.to_ascii_lowercase().replace('-', "_").as_str() {
                    $($name $(| $alias)* => Ok($ty::$var),)+
                    other => Err(format!("unknown {} `{other}`", stringify!($ty))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$var => $name,)+ })
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateDist {
    #[default]
    Normal,
    /// `χ²₂/2 + μ − 1`: mean μ, variance 1, right-skewed.
    Chisq2,
}
str_enum!(CovariateDist { Normal => "normal", Chisq2 => "chisq2" | "chisq" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    #[default]
    OneToOne,
    ThreeToOne,
    SingleArm,
}
str_enum!(Allocation { OneToOne => "one_to_one" | "1:1" | "11", ThreeToOne => "three_to_one" | "3:1" | "31", SingleArm => "single_arm" | "single" });

impl Allocation {
    /// `(n1, n0)` for a target of nominal size `n`.
    pub fn arm_sizes(self, n: usize) -> (usize, usize) {
        match self {
            Allocation::OneToOne => (n / 2, n / 2),
            Allocation::ThreeToOne => (3 * n / 4, n / 4),
            Allocation::SingleArm => (n, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    /// Outcome model `(1, z, x, z·x)`.
    #[default]
    Identified,
    /// Outcome model `(1, z)`.
    Misidentified,
}
str_enum!(ModelSpec { Identified => "identified", Misidentified => "misidentified" | "misspecified" });

impl ModelSpec {
    pub fn regression_model(self) -> RegressionModel {
        match self {
            ModelSpec::Identified => RegressionModel::CovariatesInteraction,
            ModelSpec::Misidentified => RegressionModel::ArmOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub n: usize,
    pub covariate_dist: CovariateDist,
    pub allocation: Allocation,
    pub model_spec: ModelSpec,
    pub borrow: Borrow,
    pub replications: usize,
    pub base_seed: u64,
    pub meat: Meat,
    /// Include `arm × x̄` in the meta-regression design.
    pub meta_interaction: bool,
    pub pin_target_weights: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            k: 10,
            n: 100,
            covariate_dist: CovariateDist::Normal,
            allocation: Allocation::OneToOne,
            model_spec: ModelSpec::Identified,
            borrow: Borrow::BothArms,
            replications: 500,
            base_seed: 1,
            meat: Meat::W4,
            meta_interaction: true,
            pin_target_weights: false,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.n < 4 {
            return Err(Error::Config("n must be at least 4".into()));
        }
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!(
            "K{}_n{}_{}_{}_{}_{}",
            self.k, self.n, self.covariate_dist, self.allocation, self.model_spec, self.borrow
        )
    }

    fn pipeline_options(&self, recon_seed: u64) -> PipelineOptions {
        PipelineOptions {
            meta_terms: if self.meta_interaction {
                MetaTerms::with_interactions(1)
            } else {
                MetaTerms::main_effects(1)
            },
            reconstruction: ReconstructionConfig::with_seed(recon_seed, self.borrow),
            features: FeatureMap::quadratic(1),
            fit: FitOptions::default(),
            pin_target: self.pin_target_weights,
            model: self.model_spec.regression_model(),
            meat: self.meat,
        }
    }
}

/// Covariate mean of meta trial `k` (1-based) out of `K`.
pub fn trial_mean(k: usize, big_k: usize) -> f64 {
    if big_k <= 1 {
        0.0
    } else {
        4.0 * (k as f64 - 1.0) / (big_k as f64 - 1.0) - 1.0
    }
}

fn draw_x<R: Rng + ?Sized>(dist: CovariateDist, mu: f64, rng: &mut R) -> f64 {
    match dist {
        CovariateDist::Normal => Normal::new(mu, 1.0).expect("unit sd").sample(rng),
        CovariateDist::Chisq2 => ChiSquared::new(2.0).expect("df 2").sample(rng) / 2.0 + mu - 1.0,
    }
}

fn draw_subjects<R: Rng + ?Sized>(
    trial_id: &str,
    z: Arm,
    m: usize,
    mu: f64,
    dist: CovariateDist,
    source: Source,
    rng: &mut R,
) -> Vec<SubjectRecord> {
    let eps = Normal::new(0.0, 1.0).expect("unit sd");
    (0..m)
        .map(|_| {
            let x = draw_x(dist, mu, rng);
            SubjectRecord {
                trial_id: trial_id.to_string(),
                z,
                y: outcome_mean(z, x) + eps.sample(rng),
                x: vec![x],
                weight: 1.0,
                source,
            }
        })
        .collect()
}

fn mean_var(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = if n > 1.0 {
        v.map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

fn summarize_arm(trial_id: &str, z: Arm, rows: &[SubjectRecord]) -> ArmSummary {
    let (y_mean, y_var) = mean_var(rows.iter().map(|s| s.y));
    let (x_mean, x_var) = mean_var(rows.iter().map(|s| s.x[0]));
    ArmSummary {
        trial_id: trial_id.to_string(),
        arm: z,
        n: rows.len(),
        y_mean,
        y_var,
        x_mean: vec![x_mean],
        x_var: vec![x_var],
        x_family: vec![CovariateFamily::Continuous],
    }
}

/// Meta trial `k` (1-based): latent IPD and the arm summaries (sample means
/// and `n − 1` variances) that a meta-analysis would see.
pub fn generate_meta_trial<R: Rng + ?Sized>(
    k: usize,
    big_k: usize,
    n: usize,
    dist: CovariateDist,
    rng: &mut R,
) -> (Vec<SubjectRecord>, TrialSummary) {
    let size = Uniform::new(n as f64, 4.0 * n as f64).expect("n < 4n").sample(rng).floor() as usize;
    let n1 = size / 2;
    let n0 = size - n1;
    let mu = trial_mean(k, big_k);
    let id = format!("meta{k}");
    let treat = draw_subjects(&id, Arm::Treatment, n1, mu, dist, Source::Reconstructed, rng);
    let ctrl = draw_subjects(&id, Arm::Control, n0, mu, dist, Source::Reconstructed, rng);
    let arms = vec![
        summarize_arm(&id, Arm::Treatment, &treat),
        summarize_arm(&id, Arm::Control, &ctrl),
    ];
    let summary = TrialSummary::new(id, arms).expect("generated arms are valid");
    let mut ipd = treat;
    ipd.extend(ctrl);
    (ipd, summary)
}

pub fn generate_target_trial<R: Rng + ?Sized>(
    n: usize,
    allocation: Allocation,
    dist: CovariateDist,
    rng: &mut R,
) -> Dataset {
    let (n1, n0) = allocation.arm_sizes(n);
    let mut subjects = draw_subjects(TARGET_ID, Arm::Treatment, n1, 0.0, dist, Source::Target, rng);
    subjects.extend(draw_subjects(TARGET_ID, Arm::Control, n0, 0.0, dist, Source::Target, rng));
    Dataset::new(TARGET_ID, 1, subjects)
}

/// `(delta, se, ci_low, ci_high)` of one successful replication.
type Draw = (f64, f64, f64, f64);

/// One estimator's result in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Outcome {
    Estimate {
        delta: f64,
        se: f64,
        ci_low: f64,
        ci_high: f64,
    },
    /// No estimate is defined (a single-arm target analysed alone).
    Unestimable,
    Failed(String),
}

impl Outcome {
    fn from_fit(fit: &wls::WeightedFit) -> Outcome {
        let c = fit.treatment();
        Outcome::Estimate {
            delta: c.estimate,
            se: c.se,
            ci_low: c.ci_low,
            ci_high: c.ci_high,
        }
    }

    fn from_univariate(e: &wls::UnivariateEstimate) -> Outcome {
        Outcome::Estimate {
            delta: e.delta_r,
            se: e.se,
            ci_low: e.ci_low,
            ci_high: e.ci_high,
        }
    }

    fn from_error(e: Error) -> Outcome {
        match e {
            Error::ArmUnestimable { .. } => Outcome::Unestimable,
            Error::Stage { source, .. } if matches!(*source, Error::ArmUnestimable { .. }) => Outcome::Unestimable,
            other => Outcome::Failed(other.to_string()),
        }
    }
}

pub const ESTIMATORS: [&str; 4] = ["inmass", "target", "inmass_univariate", "target_univariate"];

/// Results of one replication, indexed like [`ESTIMATORS`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub index: usize,
    pub outcomes: [Outcome; 4],
}

impl Replication {
    pub fn inmass(&self) -> &Outcome {
        &self.outcomes[0]
    }

    pub fn target(&self) -> &Outcome {
        &self.outcomes[1]
    }
}

pub fn run_replication(cfg: &ScenarioConfig, r: usize) -> Replication {
    let mut rng: StreamRng = rng::substream(cfg.base_seed, r as u64);
    let trials: Vec<TrialSummary> = (1..=cfg.k)
        .map(|k| generate_meta_trial(k, cfg.k, cfg.n, cfg.covariate_dist, &mut rng).1)
        .collect();
    let target = generate_target_trial(cfg.n, cfg.allocation, cfg.covariate_dist, &mut rng);
    let recon_seed: u64 = rng.random();
    let opts = cfg.pipeline_options(recon_seed);

    let (inmass, inmass_uni) = match pipeline::run(&target, &trials, &opts) {
        Ok(out) => (
            Outcome::from_fit(&out.fit),
            out.univariate()
                .map(|e| Outcome::from_univariate(&e))
                .unwrap_or_else(Outcome::from_error),
        ),
        Err(e) => {
            let o = Outcome::from_error(e);
            (o.clone(), o)
        }
    };
    let target_fit = wls::fit_weighted_regression(&target, opts.model, opts.meat)
        .map(|f| Outcome::from_fit(&f))
        .unwrap_or_else(Outcome::from_error);
    let target_uni = wls::estimate_univariate(&target)
        .map(|e| Outcome::from_univariate(&e))
        .unwrap_or_else(Outcome::from_error);
    Replication {
        index: r,
        outcomes: [inmass, target_fit, inmass_uni, target_uni],
    }
}

/// Aggregated performance of one estimator over a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: String,
    pub successes: usize,
    pub failures: usize,
    pub unestimable: usize,
    /// False when no replication produced an estimate.
    pub valid: bool,
    pub mean: f64,
    pub bias: f64,
    pub mse: f64,
    pub empirical_sd: f64,
    pub mean_se: f64,
    /// Mean of the squared standard errors.
    pub mean_var: f64,
    pub coverage: f64,
    pub power_curve: Vec<f64>,
    pub type1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub scenario: String,
    pub config: ScenarioConfig,
    pub delta0_grid: Vec<f64>,
    pub estimators: Vec<EstimatorSummary>,
}

impl CellResult {
    pub fn estimator(&self, name: &str) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.estimator == name)
    }

    pub fn mse_inmass(&self) -> f64 {
        self.estimator("inmass").map_or(f64::NAN, |e| e.mse)
    }

    pub fn mse_target(&self) -> f64 {
        self.estimator("target").map_or(f64::NAN, |e| e.mse)
    }

    pub fn bias(&self) -> f64 {
        self.estimator("inmass").map_or(f64::NAN, |e| e.bias)
    }

    pub fn type1(&self) -> f64 {
        self.estimator("inmass").map_or(f64::NAN, |e| e.type1)
    }

    pub fn failures(&self) -> usize {
        self.estimator("inmass").map_or(0, |e| e.failures)
    }
}

/// Summarises one estimator's outcomes, in replication order.
pub fn summarize<'a>(name: &str, outcomes: impl IntoIterator<Item = &'a Outcome>, grid: &[f64]) -> EstimatorSummary {
    let mut est = Vec::new();
    let (mut failures, mut unestimable) = (0, 0);
    for o in outcomes {
        match o {
            Outcome::Estimate { delta, se, ci_low, ci_high } => est.push((*delta, *se, *ci_low, *ci_high)),
            Outcome::Unestimable => unestimable += 1,
            Outcome::Failed(_) => failures += 1,
        }
    }
    let m = est.len() as f64;
    let avg = |f: &dyn Fn(&Draw) -> f64| {
        if est.is_empty() {
            f64::NAN
        } else {
            est.iter().map(f).sum::<f64>() / m
        }
    };
    let mean = avg(&|e| e.0);
    let power_curve: Vec<f64> = grid
        .iter()
        .map(|&d0| avg(&|e| if e.2 > d0 || e.3 < d0 { 1.0 } else { 0.0 }))
        .collect();
    EstimatorSummary {
        estimator: name.to_string(),
        successes: est.len(),
        failures,
        unestimable,
        valid: !est.is_empty(),
        mean,
        bias: mean - DELTA_T,
        mse: avg(&|e| (e.0 - DELTA_T).powi(2)),
        empirical_sd: if est.len() > 1 {
            (est.iter().map(|e| (e.0 - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
        } else {
            f64::NAN
        },
        mean_se: avg(&|e| e.1),
        mean_var: avg(&|e| e.1 * e.1),
        coverage: avg(&|e| if e.2 <= DELTA_T && DELTA_T <= e.3 { 1.0 } else { 0.0 }),
        type1: power_curve.first().copied().unwrap_or(f64::NAN),
        power_curve,
    }
}

pub fn aggregate(cfg: &ScenarioConfig, reps: &[Replication]) -> CellResult {
    let grid = delta0_grid();
    let estimators = ESTIMATORS
        .iter()
        .enumerate()
        .map(|(i, name)| summarize(name, reps.iter().map(|r| &r.outcomes[i]), &grid))
        .collect();
    CellResult {
        scenario: cfg.label(),
        config: cfg.clone(),
        delta0_grid: grid,
        estimators,
    }
}

/// Runs all replications (in parallel on the current rayon pool) and folds
/// them in index order, so the result does not depend on the thread count.
pub fn run_cell(cfg: &ScenarioConfig) -> Result<CellResult> {
    cfg.validate()?;
    let reps: Vec<Replication> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| run_replication(cfg, r))
        .collect();
    let failed = reps.iter().filter(|r| matches!(r.inmass(), Outcome::Failed(_))).count();
    if failed > 0 {
        log::warn!("{}: {failed} of {} replications failed", cfg.label(), cfg.replications);
    }
    Ok(aggregate(cfg, &reps))
}

/// Long format: `scenario,estimator,metric,delta0,value`.
pub fn write_cell_csv<W: Write>(w: W, cells: &[CellResult]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["scenario", "estimator", "metric", "delta0", "value"])?;
    for c in cells {
        for e in &c.estimators {
            let scalars = [
                ("replications", c.config.replications as f64),
                ("successes", e.successes as f64),
                ("failures", e.failures as f64),
                ("unestimable", e.unestimable as f64),
                ("mean", e.mean),
                ("bias", e.bias),
                ("mse", e.mse),
                ("empirical_sd", e.empirical_sd),
                ("mean_se", e.mean_se),
                ("mean_var", e.mean_var),
                ("coverage", e.coverage),
                ("type1", e.type1),
            ];
            for (metric, v) in scalars {
                wtr.write_record([c.scenario.as_str(), &e.estimator, metric, "", &fmt_value(v)])?;
            }
            for (d0, p) in c.delta0_grid.iter().zip(&e.power_curve) {
                wtr.write_record([c.scenario.as_str(), &e.estimator, "power", &format!("{d0:.1}"), &fmt_value(*p)])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

fn fmt_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "NA".to_string()
    }
}
