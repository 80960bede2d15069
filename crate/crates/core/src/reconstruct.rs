//! Pseudo individual-participant data from arm-level aggregates.
//!
//! Covariates are drawn independently per column (Normal for continuous,
//! Bernoulli for binary) from the reported arm moments; outcomes follow the
//! fitted meta-regression plus Gaussian noise whose variance tops the
//! covariate-explained part up to the reported outcome variance:
//!
//! ```text
//! Y* = row(z, x*)·β̂ + ε*,   ε* ~ N(0, s²)
//! s² = max(floor·σ̂², σ̂² − Σ_j slope_j² · x_var_j)
//! ```
//!
//! where `slope_j` is the within-arm slope on covariate `j` (main effect plus
//! the arm interaction, if any). Sample mean and variance of `Y*` then match
//! `x̄·β̂` and `σ̂²` as the arm size grows.

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Arm, ArmSummary, CovariateFamily, Source, SubjectRecord, TrialSummary};
use crate::error::{Error, Result};
use crate::meta::MetaFit;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Borrow {
    #[default]
    #[serde(alias = "both")]
    BothArms,
    #[serde(alias = "control")]
    ControlOnly,
}

impl Borrow {
    pub fn includes(self, arm: Arm) -> bool {
        match self {
            Borrow::BothArms => true,
            Borrow::ControlOnly => arm == Arm::Control,
        }
    }
}

impl std::str::FromStr for Borrow {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "both_arms" | "both" => Ok(Borrow::BothArms),
            "control_only" | "control" => Ok(Borrow::ControlOnly),
            other => Err(format!("unknown borrowing strategy `{other}`")),
        }
    }
}

impl std::fmt::Display for Borrow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Borrow::BothArms => f.write_str("both_arms"),
            Borrow::ControlOnly => f.write_str("control_only"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionConfig {
    pub rng_seed: u64,
    #[serde(default)]
    pub family_overrides: Option<Vec<CovariateFamily>>,
    /// Lower bound on the error variance, relative to the arm outcome variance.
    pub error_floor: f64,
    pub borrow: Borrow,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            rng_seed: 0,
            family_overrides: None,
            error_floor: 1e-8,
            borrow: Borrow::BothArms,
        }
    }
}

impl ReconstructionConfig {
    pub fn with_seed(seed: u64, borrow: Borrow) -> Self {
        ReconstructionConfig {
            rng_seed: seed,
            borrow,
            ..Default::default()
        }
    }

    fn family(&self, arm: &ArmSummary, j: usize) -> CovariateFamily {
        self.family_overrides
            .as_ref()
            .and_then(|f| f.get(j).copied())
            .unwrap_or(arm.x_family[j])
    }
}

/// `n` independent covariate vectors drawn from the arm's reported moments.
pub fn sample_covariates<R: Rng + ?Sized>(
    arm: &ArmSummary,
    n: usize,
    cfg: &ReconstructionConfig,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    enum Sampler {
        Normal(Normal<f64>),
        Bernoulli(Bernoulli),
    }
    let p = arm.p();
    let samplers = (0..p)
        .map(|j| {
            let (m, v) = (arm.x_mean[j], arm.x_var[j]);
            if !(v >= 0.0) || !v.is_finite() || !m.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "trial `{}` arm {}: covariate x{} has invalid moments ({m}, {v})",
                    arm.trial_id,
                    arm.arm,
                    j + 1
                )));
            }
            match cfg.family(arm, j) {
                CovariateFamily::Continuous => Normal::new(m, v.sqrt())
                    .map(Sampler::Normal)
                    .map_err(|e| Error::InvalidInput(e.to_string())),
                CovariateFamily::Binary => Bernoulli::new(m).map(Sampler::Bernoulli).map_err(|_| {
                    Error::InvalidInput(format!(
                        "trial `{}` arm {}: binary covariate x{} has mean {m} outside [0, 1]",
                        arm.trial_id,
                        arm.arm,
                        j + 1
                    ))
                }),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let row = samplers
            .iter()
            .map(|s| match s {
                Sampler::Normal(d) => d.sample(rng),
                Sampler::Bernoulli(d) => {
                    if d.sample(rng) {
                        1.0
                    } else {
                        0.0
                    }
                }
            })
            .collect();
        out.push(row);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorVariance {
    /// `σ̂² − Σ slope² · x_var` before clamping; may be negative.
    pub raw: f64,
    pub used: f64,
    pub clamped: bool,
}

fn check_layout(arm: &ArmSummary, meta: &MetaFit) -> Result<crate::meta::MetaTerms> {
    let terms = meta.terms();
    if terms.width() != meta.beta.len() {
        return Err(Error::DesignMismatch(format!(
            "meta fit has {} coefficients but its layout needs {}",
            meta.beta.len(),
            terms.width()
        )));
    }
    if let Some(max) = terms.max_index() {
        if max >= arm.p() {
            return Err(Error::DesignMismatch(format!(
                "meta fit uses covariate x{} but trial `{}` reports {}",
                max + 1,
                arm.trial_id,
                arm.p()
            )));
        }
    }
    Ok(terms)
}

/// Residual variance used to reconstruct outcomes of `arm`.
pub fn error_variance(arm: &ArmSummary, meta: &MetaFit, floor: f64) -> Result<ErrorVariance> {
    let terms = check_layout(arm, meta)?;
    let slopes = terms.arm_slopes(&meta.beta, arm.arm, arm.p());
    let explained: f64 = slopes.iter().zip(&arm.x_var).map(|(b, v)| b * b * v).sum();
    let raw = arm.y_var - explained;
    let lo = floor * arm.y_var;
    Ok(if raw < lo {
        ErrorVariance {
            raw,
            used: lo,
            clamped: true,
        }
    } else {
        ErrorVariance {
            raw,
            used: raw,
            clamped: false,
        }
    })
}

/// Reconstructs the `n` subjects of one arm.
pub fn reconstruct_arm<R: Rng + ?Sized>(
    arm: &ArmSummary,
    meta: &MetaFit,
    cfg: &ReconstructionConfig,
    rng: &mut R,
) -> Result<Vec<SubjectRecord>> {
    if !(cfg.error_floor >= 0.0) {
        return Err(Error::Config("error_floor must be nonnegative".into()));
    }
    let terms = check_layout(arm, meta)?;
    let ev = error_variance(arm, meta, cfg.error_floor)?;
    if ev.clamped {
        log::warn!(
            "trial `{}` arm {}: covariate-explained variance exceeds outcome variance \
             (raw error variance {:.6}); clamped to {:.3e}",
            arm.trial_id,
            arm.arm,
            ev.raw,
            ev.used
        );
    }
    let xs = sample_covariates(arm, arm.n, cfg, rng)?;
    let noise = Normal::new(0.0, ev.used.sqrt()).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let records = xs
        .into_iter()
        .map(|x| {
            let mean: f64 = terms
                .row(arm.arm, &x)
                .iter()
                .zip(&meta.beta)
                .map(|(a, b)| a * b)
                .sum();
            SubjectRecord {
                trial_id: arm.trial_id.clone(),
                z: arm.arm,
                y: mean + noise.sample(rng),
                x,
                weight: 1.0,
                source: Source::Reconstructed,
            }
        })
        .collect();
    Ok(records)
}

/// Reconstructs every borrowed arm. Each arm draws from its own substream keyed
/// by `(trial_id, arm)`, so output does not depend on trial order.
pub fn reconstruct_all(
    trials: &[TrialSummary],
    meta: &MetaFit,
    cfg: &ReconstructionConfig,
) -> Result<Vec<SubjectRecord>> {
    let mut out = Vec::new();
    for t in trials {
        for a in &t.arms {
            if !cfg.borrow.includes(a.arm) {
                continue;
            }
            let mut r = rng::substream(cfg.rng_seed, rng::arm_stream_id(&t.trial_id, a.arm.as_u8()));
            out.extend(reconstruct_arm(a, meta, cfg, &mut r)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::MetaTerms;

    fn arm(n: usize, y_var: f64, x_mean: f64, x_var: f64) -> ArmSummary {
        ArmSummary {
            trial_id: "A".into(),
            arm: Arm::Control,
            n,
            y_mean: 0.0,
            y_var,
            x_mean: vec![x_mean],
            x_var: vec![x_var],
            x_family: vec![CovariateFamily::Continuous],
        }
    }

    fn meta(beta: Vec<f64>) -> MetaFit {
        let q = beta.len();
        MetaFit {
            beta,
            cov_beta: vec![vec![0.0; q]; q],
            tau2: 0.0,
            q_stat: 0.0,
            df: 1,
            names: None,
            terms: None,
        }
    }

    fn mean_var(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn degenerate_covariate_is_exact() {
        let a = arm(100, 1.0, 0.0, 0.0);
        let xs = sample_covariates(&a, 100, &Default::default(), &mut rng::substream(1, 1)).unwrap();
        assert!(xs.iter().all(|r| r[0] == 0.0));
    }

    #[test]
    fn continuous_moments_match_reported() {
        let a = arm(100_000, 1.0, 50.8, 10.1 * 10.1);
        let xs = sample_covariates(&a, 100_000, &Default::default(), &mut rng::substream(2, 0)).unwrap();
        let (m, v) = mean_var(&xs.iter().map(|r| r[0]).collect::<Vec<_>>());
        assert!((m - 50.8).abs() < 0.1, "mean {m}");
        assert!((v.sqrt() - 10.1).abs() < 0.1, "sd {}", v.sqrt());
    }

    #[test]
    fn binary_proportion_within_mc_bound() {
        let mut a = arm(100_000, 1.0, 0.3, 0.21);
        a.x_family = vec![CovariateFamily::Binary];
        let xs = sample_covariates(&a, 100_000, &Default::default(), &mut rng::substream(3, 0)).unwrap();
        let prop = xs.iter().map(|r| r[0]).sum::<f64>() / 1e5;
        let bound = 3.0 * (0.3f64 * 0.7 / 1e5).sqrt();
        assert!(bound < 0.01);
        assert!((prop - 0.3).abs() < bound, "{prop}");
        assert!(xs.iter().all(|r| r[0] == 0.0 || r[0] == 1.0));
    }

    #[test]
    fn invalid_moments_are_rejected() {
        let a = arm(10, 1.0, 0.0, -1.0);
        assert!(sample_covariates(&a, 10, &Default::default(), &mut rng::substream(1, 1)).is_err());
        let mut b = arm(10, 1.0, 1.5, 0.1);
        b.x_family = vec![CovariateFamily::Binary];
        assert!(sample_covariates(&b, 10, &Default::default(), &mut rng::substream(1, 1)).is_err());
    }

    #[test]
    fn zero_slope_keeps_full_error_variance() {
        let a = arm(100_000, 1.0, 2.0, 4.0);
        let m = meta(vec![0.5, 1.0, 0.0]);
        let ev = error_variance(&a, &m, 1e-8).unwrap();
        assert_eq!(ev.used, 1.0);
        let recs = reconstruct_arm(&a, &m, &Default::default(), &mut rng::substream(4, 0)).unwrap();
        let (mu, v) = mean_var(&recs.iter().map(|r| r.y).collect::<Vec<_>>());
        assert!((mu - 0.5).abs() < 4.0 * (1.0f64 / 1e5).sqrt());
        assert!((v - 1.0).abs() < 0.02);
        assert!(recs.iter().all(|r| r.source == Source::Reconstructed && r.weight == 1.0 && r.z == Arm::Control));
    }

    #[test]
    fn excess_explained_variance_is_clamped() {
        let a = arm(50, 1.0, 0.0, 4.0);
        let m = meta(vec![0.0, 0.0, 1.0]);
        let ev = error_variance(&a, &m, 1e-8).unwrap();
        assert!(ev.clamped);
        assert_eq!(ev.raw, -3.0);
        assert_eq!(ev.used, 1e-8);
        // still produces records
        let recs = reconstruct_arm(&a, &m, &Default::default(), &mut rng::substream(4, 0)).unwrap();
        assert_eq!(recs.len(), 50);
    }

    #[test]
    fn interaction_slope_enters_error_variance() {
        let mut a = arm(10, 5.0, 0.0, 2.0);
        a.arm = Arm::Treatment;
        let mut m = meta(vec![1.0, 2.0, -1.0, 0.5]);
        m.terms = Some(MetaTerms::with_interactions(1));
        let ev = error_variance(&a, &m, 0.0).unwrap();
        // within-arm slope -0.5
        assert!((ev.used - (5.0 - 0.25 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn layout_mismatch_is_hard_error() {
        let a = arm(10, 1.0, 0.0, 1.0);
        let m = meta(vec![0.0, 0.0, 1.0, 2.0]); // implies two covariates
        let err = reconstruct_arm(&a, &m, &Default::default(), &mut rng::substream(1, 1)).unwrap_err();
        assert!(matches!(err, Error::DesignMismatch(_)));
    }

    #[test]
    fn control_only_skips_treatment_and_is_deterministic() {
        let mut t = arm(20, 1.0, 0.0, 1.0);
        t.arm = Arm::Treatment;
        let c = arm(30, 1.0, 0.0, 1.0);
        let trial = TrialSummary::new("A", vec![t, c]).unwrap();
        let m = meta(vec![0.0, 1.0, 0.5]);
        let cfg = ReconstructionConfig::with_seed(9, Borrow::ControlOnly);
        let a = reconstruct_all(std::slice::from_ref(&trial), &m, &cfg).unwrap();
        assert_eq!(a.len(), 30);
        assert!(a.iter().all(|r| r.z == Arm::Control));
        let b = reconstruct_all(std::slice::from_ref(&trial), &m, &cfg).unwrap();
        assert_eq!(a, b);
        let both = reconstruct_all(&[trial], &m, &ReconstructionConfig::with_seed(9, Borrow::BothArms)).unwrap();
        assert_eq!(both.len(), 50);
        assert!(reconstruct_all(&[], &m, &cfg).unwrap().is_empty());
    }
}
