//! Arm-level random-effects meta-regression with the DerSimonian-Laird
//! moment estimator of the between-trial variance.
//!
//! Each trial arm contributes one row: response = arm outcome mean, sampling
//! variance = `y_var / n`, design = `(1, arm, selected covariate means,
//! arm × selected covariate means)`. The between-trial variance is estimated
//! by the trace generalisation of DerSimonian-Laird:
//!
//! ```text
//! Q   = Σ e_r² / v_r                       (fixed-effect residuals)
//! c   = tr(W) − tr((XᵀWX)⁻¹ XᵀW²X),  W = diag(1/v_r)
//! τ̂²  = max(0, (Q − (R − q)) / c)
//! ```
//!
//! and the coefficients are refit with weights `1/(v_r + τ̂²)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Arm, TrialSummary};
use crate::error::{Error, Result};
use crate::linalg::{self, SpdFactor};
use crate::stats;

/// Which covariate columns enter the arm-level design.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaTerms {
    /// Zero-based covariate indices entering as main effects.
    pub covariates: Vec<usize>,
    /// Zero-based covariate indices entering as `arm × covariate` products.
    #[serde(default)]
    pub arm_interactions: Vec<usize>,
}

impl MetaTerms {
    /// Intercept, arm and every covariate main effect.
    pub fn main_effects(p: usize) -> Self {
        MetaTerms {
            covariates: (0..p).collect(),
            arm_interactions: Vec::new(),
        }
    }

    /// Main effects plus an arm interaction for every covariate.
    pub fn with_interactions(p: usize) -> Self {
        MetaTerms {
            covariates: (0..p).collect(),
            arm_interactions: (0..p).collect(),
        }
    }

    pub fn width(&self) -> usize {
        2 + self.covariates.len() + self.arm_interactions.len()
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = vec!["intercept".to_string(), "treatment".to_string()];
        names.extend(self.covariates.iter().map(|j| format!("x{}", j + 1)));
        names.extend(self.arm_interactions.iter().map(|j| format!("treatment:x{}", j + 1)));
        names
    }

    /// Design row for covariate values `x` in arm `arm`.
    pub fn row(&self, arm: Arm, x: &[f64]) -> Vec<f64> {
        let z = arm.indicator();
        let mut r = Vec::with_capacity(self.width());
        r.push(1.0);
        r.push(z);
        r.extend(self.covariates.iter().map(|&j| x[j]));
        r.extend(self.arm_interactions.iter().map(|&j| z * x[j]));
        r
    }

    /// Within-arm slope of the outcome on each covariate implied by `beta`.
    /// Covariates absent from the design get slope zero.
    pub fn arm_slopes(&self, beta: &[f64], arm: Arm, p: usize) -> Vec<f64> {
        let mut slopes = vec![0.0; p];
        let z = arm.indicator();
        for (k, &j) in self.covariates.iter().enumerate() {
            slopes[j] += beta[2 + k];
        }
        let off = 2 + self.covariates.len();
        for (k, &j) in self.arm_interactions.iter().enumerate() {
            slopes[j] += z * beta[off + k];
        }
        slopes
    }

    pub fn max_index(&self) -> Option<usize> {
        self.covariates.iter().chain(&self.arm_interactions).copied().max()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRow {
    pub trial_id: String,
    pub arm: Option<Arm>,
    pub y: f64,
    /// Sampling variance of `y` (variance of the arm mean).
    pub v: f64,
    pub design: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaDesign {
    pub rows: Vec<MetaRow>,
    pub names: Vec<String>,
    pub terms: Option<MetaTerms>,
}

impl MetaDesign {
    /// Builds a design from explicit rows; checks positive variances and at
    /// least one residual degree of freedom.
    pub fn from_rows(rows: Vec<MetaRow>, names: Vec<String>, terms: Option<MetaTerms>) -> Result<Self> {
        let q = names.len();
        for r in &rows {
            if r.design.len() != q {
                return Err(Error::DesignMismatch(format!(
                    "row for `{}` has {} columns, expected {q}",
                    r.trial_id,
                    r.design.len()
                )));
            }
            if !(r.v > 0.0) || !r.v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "trial `{}`: sampling variance must be positive, got {}",
                    r.trial_id, r.v
                )));
            }
            if !r.y.is_finite() || r.design.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("trial `{}`: non-finite row", r.trial_id)));
            }
        }
        if rows.len() < q + 1 {
            return Err(Error::Unidentifiable(format!(
                "{} rows for {q} coefficients; need at least {}",
                rows.len(),
                q + 1
            )));
        }
        Ok(MetaDesign { rows, names, terms })
    }

    pub fn q(&self) -> usize {
        self.names.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.q(), |i, j| self.rows[i].design[j])
    }
}

/// One design row per trial arm.
pub fn build_design(trials: &[TrialSummary], terms: &MetaTerms) -> Result<MetaDesign> {
    if let Some(max) = terms.max_index() {
        if let Some(t) = trials.iter().find(|t| t.p() <= max) {
            return Err(Error::DesignMismatch(format!(
                "covariate x{} requested but trial `{}` has only {}",
                max + 1,
                t.trial_id,
                t.p()
            )));
        }
    }
    let mut rows = Vec::new();
    for t in trials {
        for a in &t.arms {
            a.validate()?;
            rows.push(MetaRow {
                trial_id: t.trial_id.clone(),
                arm: Some(a.arm),
                y: a.y_mean,
                v: a.mean_variance(),
                design: terms.row(a.arm, &a.x_mean),
            });
        }
    }
    let first_arm = rows.first().and_then(|r| r.arm);
    if rows.iter().all(|r| r.arm == first_arm) {
        return Err(Error::Unidentifiable(
            "all rows come from one arm; the treatment coefficient is not identified".into(),
        ));
    }
    MetaDesign::from_rows(rows, terms.column_names(), Some(terms.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaFit {
    pub beta: Vec<f64>,
    pub cov_beta: Vec<Vec<f64>>,
    pub tau2: f64,
    pub q_stat: f64,
    pub df: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terms: Option<MetaTerms>,
}

impl MetaFit {
    /// Design layout; files without an explicit layout are read as
    /// `(intercept, arm, x1..x_{q-2})`.
    pub fn terms(&self) -> MetaTerms {
        self.terms
            .clone()
            .unwrap_or_else(|| MetaTerms::main_effects(self.beta.len().saturating_sub(2)))
    }
}

/// Weighted least squares on the design with weights `1/(v_r + extra)`.
/// Returns coefficients, their covariance `(XᵀWX)⁻¹`, and the factor.
fn wls(design: &MetaDesign, extra: f64) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let x = design.matrix();
    let w: Vec<f64> = design.rows.iter().map(|r| 1.0 / (r.v + extra)).collect();
    let y: Vec<f64> = design.rows.iter().map(|r| r.y).collect();
    let gram = linalg::weighted_gram(&x, &w);
    let factor = SpdFactor::new(&gram, &design.names)?;
    let beta = factor.solve(&linalg::weighted_xty(&x, &w, &y));
    Ok((beta, factor.inverse(), x))
}

/// Fixed-effect (inverse-variance) fit: coefficients and covariance.
pub fn fit_fixed_effect(design: &MetaDesign) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let (b, cov, _) = wls(design, 0.0)?;
    Ok((b.iter().copied().collect(), linalg::to_rows(&cov)))
}

pub fn fit_dl(design: &MetaDesign) -> Result<MetaFit> {
    let r = design.len();
    let q = design.q();
    let (b_fe, a_inv, x) = wls(design, 0.0)?;

    let mut q_stat = 0.0;
    let mut tr_w = 0.0;
    // XᵀW²X
    let w2: Vec<f64> = design.rows.iter().map(|row| 1.0 / (row.v * row.v)).collect();
    let g2 = linalg::weighted_gram(&x, &w2);
    for (i, row) in design.rows.iter().enumerate() {
        let fitted: f64 = (0..q).map(|j| x[(i, j)] * b_fe[j]).sum();
        let e = row.y - fitted;
        q_stat += e * e / row.v;
        tr_w += 1.0 / row.v;
    }
    let c = tr_w - (&a_inv * g2).trace();
    let df = r - q;
    let tau2 = if c > 0.0 {
        ((q_stat - df as f64) / c).max(0.0)
    } else {
        0.0
    };

    let (beta, cov) = if tau2 == 0.0 {
        (b_fe, a_inv)
    } else {
        let (b, cov, _) = wls(design, tau2)?;
        (b, cov)
    };
    Ok(MetaFit {
        beta: beta.iter().copied().collect(),
        cov_beta: linalg::to_rows(&cov),
        tau2,
        q_stat,
        df,
        names: Some(design.names.clone()),
        terms: design.terms.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Standard errors and normal-theory 95% intervals for each coefficient.
pub fn meta_se(fit: &MetaFit) -> Vec<CoefficientRow> {
    let z = stats::z975();
    let names = fit
        .names
        .clone()
        .unwrap_or_else(|| fit.terms().column_names());
    fit.beta
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            let se = fit.cov_beta[j][j].max(0.0).sqrt();
            CoefficientRow {
                name: names.get(j).cloned().unwrap_or_else(|| format!("b{j}")),
                estimate: b,
                se,
                ci_low: b - z * se,
                ci_high: b + z * se,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ArmSummary, CovariateFamily};
    use proptest::prelude::*;

    fn intercept_rows(yv: &[(f64, f64)]) -> MetaDesign {
        let rows = yv
            .iter()
            .enumerate()
            .map(|(i, &(y, v))| MetaRow {
                trial_id: format!("t{i}"),
                arm: None,
                y,
                v,
                design: vec![1.0],
            })
            .collect();
        MetaDesign::from_rows(rows, vec!["intercept".into()], None).unwrap()
    }

    /// Direct arithmetic for the intercept-only moment estimator.
    fn oracle_intercept_only(yv: &[(f64, f64)]) -> (f64, f64, f64) {
        let sw: f64 = yv.iter().map(|&(_, v)| 1.0 / v).sum();
        let sw2: f64 = yv.iter().map(|&(_, v)| 1.0 / (v * v)).sum();
        let mu: f64 = yv.iter().map(|&(y, v)| y / v).sum::<f64>() / sw;
        let q: f64 = yv.iter().map(|&(y, v)| (y - mu).powi(2) / v).sum();
        let c = sw - sw2 / sw;
        let tau2 = ((q - (yv.len() as f64 - 1.0)) / c).max(0.0);
        (q, c, tau2)
    }

    #[test]
    fn three_row_moment_oracle() {
        let data = [(1.0, 1.0), (2.0, 1.0), (3.0, 1.0)];
        let (q, c, tau2) = oracle_intercept_only(&data);
        assert_eq!((q, c, tau2), (2.0, 2.0, 0.0));
        let fit = fit_dl(&intercept_rows(&data)).unwrap();
        assert!((fit.q_stat - q).abs() < 1e-12);
        assert_eq!(fit.tau2, tau2);
        assert!((fit.beta[0] - 2.0).abs() < 1e-12);
        assert_eq!(fit.df, 2);
    }

    #[test]
    fn heterogeneous_rows_match_oracle() {
        let data = [(0.0, 1.0), (3.0, 1.0), (6.0, 1.0)];
        let (q, _c, tau2) = oracle_intercept_only(&data);
        assert_eq!(q, 18.0);
        assert_eq!(tau2, 8.0);
        let fit = fit_dl(&intercept_rows(&data)).unwrap();
        assert!((fit.tau2 - 8.0).abs() < 1e-12);
        assert!((fit.beta[0] - 3.0).abs() < 1e-12);
        // (Σ 1/(v+τ²))⁻¹ = 9/3
        assert!((fit.cov_beta[0][0] - 3.0).abs() < 1e-12);

        let unequal = [(0.0, 0.5), (3.0, 2.0), (6.0, 1.0), (1.0, 4.0)];
        let (q, _, tau2) = oracle_intercept_only(&unequal);
        let fit = fit_dl(&intercept_rows(&unequal)).unwrap();
        assert!((fit.q_stat - q).abs() < 1e-12);
        assert!((fit.tau2 - tau2).abs() < 1e-12);
    }

    #[test]
    fn identical_rows_have_zero_heterogeneity() {
        let fit = fit_dl(&intercept_rows(&[(1.5, 0.3); 5])).unwrap();
        assert_eq!(fit.tau2, 0.0);
        assert!((fit.beta[0] - 1.5).abs() < 1e-12);
    }

    fn arm(trial: &str, a: Arm, y: f64, x: f64) -> ArmSummary {
        ArmSummary {
            trial_id: trial.into(),
            arm: a,
            n: 50,
            y_mean: y,
            y_var: 2.0,
            x_mean: vec![x],
            x_var: vec![1.0],
            x_family: vec![CovariateFamily::Continuous],
        }
    }

    #[test]
    fn one_two_arm_trial_without_covariates() {
        let t = TrialSummary::new("A", vec![arm("A", Arm::Treatment, 1.0, 0.0), arm("A", Arm::Control, 0.0, 0.0)])
            .unwrap();
        let terms = MetaTerms::main_effects(0);
        // 2 rows for q = 2 leaves no residual degree of freedom.
        let err = build_design(std::slice::from_ref(&t), &terms).unwrap_err();
        assert!(matches!(err, Error::Unidentifiable(_)));
        // The row construction itself is 2 × 2.
        let rows: Vec<_> = t.arms.iter().map(|a| terms.row(a.arm, &a.x_mean)).collect();
        assert_eq!(rows, vec![vec![1.0, 1.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn single_arm_controls_are_unidentifiable() {
        let trials: Vec<_> = (0..3)
            .map(|k| {
                let id = format!("c{k}");
                TrialSummary::new(id.clone(), vec![arm(&id, Arm::Control, k as f64, k as f64)]).unwrap()
            })
            .collect();
        let err = build_design(&trials, &MetaTerms::main_effects(1)).unwrap_err();
        assert!(err.to_string().contains("treatment coefficient"));
    }

    #[test]
    fn collinear_design_names_columns() {
        // covariate equals the arm indicator in every trial
        let trials: Vec<_> = (0..3)
            .map(|k| {
                let id = format!("t{k}");
                TrialSummary::new(
                    id.clone(),
                    vec![
                        arm(&id, Arm::Treatment, 1.0 + k as f64, 1.0),
                        arm(&id, Arm::Control, k as f64, 0.0),
                    ],
                )
                .unwrap()
            })
            .collect();
        let d = build_design(&trials, &MetaTerms::main_effects(1)).unwrap();
        match fit_dl(&d).unwrap_err() {
            Error::Singular { columns } => assert_eq!(columns, vec!["x1".to_string()]),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn se_and_ci_from_covariance() {
        let mut fit = MetaFit {
            beta: vec![0.0, 0.0],
            cov_beta: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            tau2: 0.0,
            q_stat: 0.0,
            df: 1,
            names: None,
            terms: None,
        };
        assert!(meta_se(&fit).iter().all(|r| r.se == 1.0));
        fit.cov_beta = vec![vec![4.0, 0.0], vec![0.0, 4.0]];
        for r in meta_se(&fit) {
            assert!((r.ci_low + 3.92).abs() < 1e-3 && (r.ci_high - 3.92).abs() < 1e-3);
        }
    }

    #[test]
    fn interaction_slopes_per_arm() {
        let t = MetaTerms::with_interactions(1);
        let beta = [1.0, 2.0, -1.0, 0.5];
        assert_eq!(t.arm_slopes(&beta, Arm::Control, 1), vec![-1.0]);
        assert_eq!(t.arm_slopes(&beta, Arm::Treatment, 1), vec![-0.5]);
        assert_eq!(t.row(Arm::Treatment, &[3.0]), vec![1.0, 1.0, 3.0, 3.0]);
    }

    fn random_design(seed: &[(f64, f64, f64)]) -> MetaDesign {
        let rows = seed
            .iter()
            .enumerate()
            .map(|(i, &(y, v, x))| MetaRow {
                trial_id: format!("r{i}"),
                arm: None,
                y,
                v,
                design: vec![1.0, (i % 2) as f64, x],
            })
            .collect();
        MetaDesign::from_rows(rows, vec!["intercept".into(), "treatment".into(), "x1".into()], None).unwrap()
    }

    proptest! {
        #[test]
        fn tau2_nonnegative_and_order_invariant(
            rows in prop::collection::vec((-5.0f64..5.0, 0.1f64..3.0, -3.0f64..3.0), 5..12),
            rot in 0usize..11,
        ) {
            let d = random_design(&rows);
            let Ok(fit) = fit_dl(&d) else { return Ok(()) };
            prop_assert!(fit.tau2 >= 0.0);
            let mut shuffled = d.clone();
            let k = rot % shuffled.rows.len();
            shuffled.rows.rotate_left(k);
            let f2 = fit_dl(&shuffled).unwrap();
            for (a, b) in fit.beta.iter().zip(&f2.beta) {
                prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn fixed_effect_scale_invariant(
            rows in prop::collection::vec((-5.0f64..5.0, 0.1f64..3.0, -3.0f64..3.0), 5..12),
            lambda in 1.1f64..20.0,
        ) {
            let d = random_design(&rows);
            let Ok((b1, _)) = fit_fixed_effect(&d) else { return Ok(()) };
            let mut scaled = d.clone();
            for r in &mut scaled.rows { r.v *= lambda; }
            let (b2, _) = fit_fixed_effect(&scaled).unwrap();
            for (a, b) in b1.iter().zip(&b2) {
                prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn zero_tau_refit_is_fixed_effect(
            rows in prop::collection::vec((-0.01f64..0.01, 1.0f64..3.0, -3.0f64..3.0), 5..12),
        ) {
            let d = random_design(&rows);
            let Ok(fit) = fit_dl(&d) else { return Ok(()) };
            if fit.tau2 == 0.0 {
                let (b, cov) = fit_fixed_effect(&d).unwrap();
                prop_assert_eq!(fit.beta, b);
                prop_assert_eq!(fit.cov_beta, cov);
            }
        }
    }
}
