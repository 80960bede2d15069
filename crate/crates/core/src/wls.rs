//! Importance-weighted treatment-effect estimators.
//!
//! The univariate path contrasts weighted arm means; the regression path fits
//! `β̂ = (XᵀWX)⁻¹XᵀWy` with a sandwich covariance.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{self, SpdFactor};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnivariateEstimate {
    pub delta_r: f64,
    pub var_r: f64,
    pub se: f64,
    pub y_bar_1: f64,
    pub y_bar_0: f64,
    pub n_tilde_1: f64,
    pub n_tilde_0: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub z_stat: f64,
    pub p_value: f64,
}

struct ArmMoments {
    n_tilde: f64,
    mean: f64,
    sigma2: f64,
}

fn arm_moments(d: &Dataset, arm: Arm) -> Result<ArmMoments> {
    let rows = || d.subjects.iter().filter(move |s| s.z == arm);
    let n_tilde: f64 = rows().map(|s| s.weight).sum();
    if !(n_tilde > 0.0) {
        return Err(Error::ArmUnestimable { arm: arm.as_u8() });
    }
    let mean = rows().map(|s| s.weight * s.y).sum::<f64>() / n_tilde;
    let sigma2 = rows()
        .map(|s| s.weight * s.weight * (s.y - mean).powi(2))
        .sum::<f64>()
        / n_tilde;
    Ok(ArmMoments { n_tilde, mean, sigma2 })
}

/// Weighted difference in arm means with its plug-in variance
/// `σ̂²_R1/Ñ_1 + σ̂²_R0/Ñ_0`, where `σ̂²_Rj = Σ w²(y − Ȳ_j)² / Ñ_j`.
pub fn estimate_univariate(d: &Dataset) -> Result<UnivariateEstimate> {
    let t = arm_moments(d, Arm::Treatment)?;
    let c = arm_moments(d, Arm::Control)?;
    let delta_r = t.mean - c.mean;
    let var_r = t.sigma2 / t.n_tilde + c.sigma2 / c.n_tilde;
    let se = var_r.sqrt();
    let z = stats::z975();
    let z_stat = delta_r / se;
    Ok(UnivariateEstimate {
        delta_r,
        var_r,
        se,
        y_bar_1: t.mean,
        y_bar_0: c.mean,
        n_tilde_1: t.n_tilde,
        n_tilde_0: c.n_tilde,
        ci_low: delta_r - z * se,
        ci_high: delta_r + z * se,
        z_stat,
        p_value: stats::normal_two_sided_p(z_stat),
    })
}

/// Per-subject meat contribution in the sandwich covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Meat {
    /// `w⁴ e² x xᵀ`.
    #[default]
    W4,
    /// `w² e² x xᵀ`, the usual weighted HC0.
    #[serde(alias = "hc0_w2")]
    Hc0,
}

impl Meat {
    fn factor(self, w: f64, e: f64) -> f64 {
        match self {
            Meat::W4 => w.powi(4) * e * e,
            Meat::Hc0 => w * w * e * e,
        }
    }
}

impl std::str::FromStr for Meat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "w4" => Ok(Meat::W4),
            "hc0" | "hc0_w2" | "w2" => Ok(Meat::Hc0),
            other => Err(format!("unknown meat `{other}` (expected w4 or hc0)")),
        }
    }
}

impl fmt::Display for Meat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Meat::W4 => "w4",
            Meat::Hc0 => "hc0",
        })
    }
}

/// Columns of the outcome regression. The arm column is always present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionModel {
    /// `(1, z)`.
    ArmOnly,
    /// `(1, z, x)`.
    #[default]
    Covariates,
    /// `(1, z, x, z·x)`.
    #[serde(rename = "interaction", alias = "covariates_interaction")]
    CovariatesInteraction,
}

impl RegressionModel {
    pub fn from_flags(include_covariates: bool, interaction: bool) -> Self {
        match (include_covariates, interaction) {
            (false, _) => RegressionModel::ArmOnly,
            (true, false) => RegressionModel::Covariates,
            (true, true) => RegressionModel::CovariatesInteraction,
        }
    }

    pub fn column_names(self, p: usize) -> Vec<String> {
        let mut names = vec!["intercept".to_string(), "treatment".to_string()];
        if self != RegressionModel::ArmOnly {
            names.extend((1..=p).map(|j| format!("x{j}")));
        }
        if self == RegressionModel::CovariatesInteraction {
            names.extend((1..=p).map(|j| format!("treatment:x{j}")));
        }
        names
    }

    pub fn row(self, z: Arm, x: &[f64]) -> Vec<f64> {
        let zi = z.indicator();
        let mut r = vec![1.0, zi];
        if self != RegressionModel::ArmOnly {
            r.extend_from_slice(x);
        }
        if self == RegressionModel::CovariatesInteraction {
            r.extend(x.iter().map(|v| zi * v));
        }
        r
    }
}

impl std::str::FromStr for RegressionModel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "arm_only" | "arm" => Ok(RegressionModel::ArmOnly),
            "covariates" | "main_effects" => Ok(RegressionModel::Covariates),
            "interaction" | "covariates_interaction" => Ok(RegressionModel::CovariatesInteraction),
            other => Err(format!("unknown regression model `{other}`")),
        }
    }
}

impl fmt::Display for RegressionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegressionModel::ArmOnly => "arm_only",
            RegressionModel::Covariates => "covariates",
            RegressionModel::CovariatesInteraction => "interaction",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedFit {
    pub model: RegressionModel,
    pub meat: Meat,
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub cov_beta: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub t_value: Vec<f64>,
    pub p_value: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    /// Residual degrees of freedom: positively weighted rows minus columns.
    pub df: usize,
    pub n_tilde_1: f64,
    pub n_tilde_0: f64,
    /// Weighted residual sum of squares `Σ w e²`.
    pub rss: f64,
}

/// Estimate, SE and inference for one coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub t_value: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl WeightedFit {
    pub fn coefficient(&self, name: &str) -> Option<Coefficient> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(Coefficient {
            name: name.to_string(),
            estimate: self.beta[i],
            se: self.se[i],
            t_value: self.t_value[i],
            p_value: self.p_value[i],
            ci_low: self.ci_low[i],
            ci_high: self.ci_high[i],
        })
    }

    /// The arm coefficient: the effect at `x = 0`.
    pub fn treatment(&self) -> Coefficient {
        self.coefficient("treatment").expect("treatment column is always present")
    }
}

fn arm_weight(d: &Dataset, arm: Arm) -> f64 {
    d.subjects.iter().filter(|s| s.z == arm).map(|s| s.weight).sum()
}

pub fn fit_weighted_regression(d: &Dataset, model: RegressionModel, meat: Meat) -> Result<WeightedFit> {
    let n_tilde_1 = arm_weight(d, Arm::Treatment);
    let n_tilde_0 = arm_weight(d, Arm::Control);
    for (arm, nt) in [(Arm::Treatment, n_tilde_1), (Arm::Control, n_tilde_0)] {
        if !(nt > 0.0) {
            return Err(Error::ArmUnestimable { arm: arm.as_u8() });
        }
    }
    if let Some(s) = d.subjects.iter().find(|s| s.x.len() != d.p) {
        return Err(Error::DesignMismatch(format!(
            "subject in trial `{}` has {} covariates, expected {}",
            s.trial_id,
            s.x.len(),
            d.p
        )));
    }
    let names = model.column_names(d.p);
    let q = names.len();
    let n = d.len();
    let x = DMatrix::from_fn(n, q, |i, j| model.row(d.subjects[i].z, &d.subjects[i].x)[j]);
    let w = d.weights();
    let y: Vec<f64> = d.subjects.iter().map(|s| s.y).collect();

    let bread = SpdFactor::new(&linalg::weighted_gram(&x, &w), &names)?;
    let beta = bread.solve(&linalg::weighted_xty(&x, &w, &y));
    let fitted = &x * &beta;
    let resid: Vec<f64> = y.iter().zip(fitted.iter()).map(|(yi, fi)| yi - fi).collect();
    let m: Vec<f64> = w.iter().zip(&resid).map(|(&wi, &ei)| meat.factor(wi, ei)).collect();
    let a_inv = bread.inverse();
    let mut cov = &a_inv * linalg::weighted_gram(&x, &m) * &a_inv;
    linalg::symmetrize(&mut cov);

    let rss = w.iter().zip(&resid).map(|(wi, ei)| wi * ei * ei).sum();
    let n_pos = w.iter().filter(|&&wi| wi > 0.0).count();
    let df = n_pos.saturating_sub(q);
    let crit = if df > 0 { stats::t975(df as f64) } else { f64::NAN };

    let beta: Vec<f64> = beta.iter().copied().collect();
    let se: Vec<f64> = (0..q).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let t_value: Vec<f64> = beta.iter().zip(&se).map(|(b, s)| b / s).collect();
    let p_value = t_value
        .iter()
        .map(|&t| if df > 0 { stats::t_two_sided_p(t, df as f64) } else { f64::NAN })
        .collect();
    Ok(WeightedFit {
        model,
        meat,
        ci_low: beta.iter().zip(&se).map(|(b, s)| b - crit * s).collect(),
        ci_high: beta.iter().zip(&se).map(|(b, s)| b + crit * s).collect(),
        names,
        cov_beta: linalg::to_rows(&cov),
        se,
        t_value,
        p_value,
        beta,
        df,
        n_tilde_1,
        n_tilde_0,
        rss,
    })
}

/// A fit with a Gaussian log-likelihood proxy for side-by-side comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedFit {
    pub fit: WeightedFit,
    /// `-(Ñ/2)(ln(2π·RSS/Ñ) + 1)` with `Ñ = Ñ_1 + Ñ_0`.
    pub loglik_proxy: f64,
    pub aic_proxy: f64,
}

/// Annotates each fit, preserving input order; no automatic selection.
pub fn choose_model(fits: Vec<WeightedFit>) -> Result<Vec<AnnotatedFit>> {
    if fits.is_empty() {
        return Err(Error::InvalidInput("no fits to compare".into()));
    }
    Ok(fits
        .into_iter()
        .map(|fit| {
            let n = fit.n_tilde_1 + fit.n_tilde_0;
            let loglik_proxy = -0.5 * n * ((2.0 * std::f64::consts::PI * fit.rss / n).ln() + 1.0);
            let k = fit.beta.len() as f64 + 1.0;
            AnnotatedFit {
                aic_proxy: 2.0 * k - 2.0 * loglik_proxy,
                loglik_proxy,
                fit,
            }
        })
        .collect())
}
