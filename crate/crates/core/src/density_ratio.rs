//! Importance weights from a target-membership logistic model.
//!
//! Every subject of the pooled set is labelled 1 if it comes from the target
//! trial and 0 otherwise; `π̂(x)` is the fitted membership probability and the
//! density ratio of the target against the pool is `ŵ = (N / n_T) · π̂`.
//! With an intercept in the model the score equation forces `Σ π̂ = n_T`, so the
//! weights average exactly one over the pool.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{self, SpdFactor};

/// Linear predictor magnitude that marks (quasi-)separation.
const SEPARATION_ETA: f64 = 30.0;
/// Ridge penalties tried, in order, when the plain fit fails.
const RIDGE_LADDER: [f64; 5] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTerm {
    Intercept,
    Linear(usize),
    Square(usize),
    Interaction(usize, usize),
    Arm,
    ArmLinear(usize),
}

impl FeatureTerm {
    fn eval(self, x: &[f64], z: Arm) -> f64 {
        match self {
            FeatureTerm::Intercept => 1.0,
            FeatureTerm::Linear(j) => x[j],
            FeatureTerm::Square(j) => x[j] * x[j],
            FeatureTerm::Interaction(j, k) => x[j] * x[k],
            FeatureTerm::Arm => z.indicator(),
            FeatureTerm::ArmLinear(j) => z.indicator() * x[j],
        }
    }

    fn max_index(self) -> Option<usize> {
        match self {
            FeatureTerm::Intercept | FeatureTerm::Arm => None,
            FeatureTerm::Linear(j) | FeatureTerm::Square(j) | FeatureTerm::ArmLinear(j) => Some(j),
            FeatureTerm::Interaction(j, k) => Some(j.max(k)),
        }
    }
}

impl fmt::Display for FeatureTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            FeatureTerm::Intercept => f.write_str("intercept"),
            FeatureTerm::Linear(j) => write!(f, "x{}", j + 1),
            FeatureTerm::Square(j) => write!(f, "x{}^2", j + 1),
            FeatureTerm::Interaction(j, k) => write!(f, "x{}*x{}", j + 1, k + 1),
            FeatureTerm::Arm => f.write_str("z"),
            FeatureTerm::ArmLinear(j) => write!(f, "z*x{}", j + 1),
        }
    }
}

fn parse_x(s: &str) -> Option<usize> {
    s.strip_prefix('x')?.parse::<usize>().ok().filter(|&j| j >= 1).map(|j| j - 1)
}

impl std::str::FromStr for FeatureTerm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || format!("cannot parse feature term `{s}`");
        if s == "intercept" || s == "1" {
            return Ok(FeatureTerm::Intercept);
        }
        if s == "z" {
            return Ok(FeatureTerm::Arm);
        }
        if let Some(base) = s.strip_suffix("^2") {
            return parse_x(base).map(FeatureTerm::Square).ok_or_else(bad);
        }
        if let Some((a, b)) = s.split_once('*') {
            return match (a.trim(), b.trim()) {
                ("z", x) | (x, "z") => parse_x(x).map(FeatureTerm::ArmLinear).ok_or_else(bad),
                (x1, x2) => match (parse_x(x1), parse_x(x2)) {
                    (Some(j), Some(k)) if j == k => Ok(FeatureTerm::Square(j)),
                    (Some(j), Some(k)) => Ok(FeatureTerm::Interaction(j, k)),
                    _ => Err(bad()),
                },
            };
        }
        parse_x(s).map(FeatureTerm::Linear).ok_or_else(bad)
    }
}

/// Ordered list of model terms; always contains the intercept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub terms: Vec<FeatureTerm>,
}

impl FeatureMap {
    pub fn new(terms: Vec<FeatureTerm>) -> Result<Self> {
        if !terms.contains(&FeatureTerm::Intercept) {
            return Err(Error::Config("feature map must include the intercept".into()));
        }
        Ok(FeatureMap { terms })
    }

    /// Intercept, every covariate, and every covariate squared.
    pub fn quadratic(p: usize) -> Self {
        let mut terms = vec![FeatureTerm::Intercept];
        terms.extend((0..p).map(FeatureTerm::Linear));
        terms.extend((0..p).map(FeatureTerm::Square));
        FeatureMap { terms }
    }

    pub fn linear(p: usize) -> Self {
        let mut terms = vec![FeatureTerm::Intercept];
        terms.extend((0..p).map(FeatureTerm::Linear));
        FeatureMap { terms }
    }

    /// Parses a comma-separated list such as `intercept,x1,x1^2,z*x1`.
    pub fn parse(spec: &str) -> Result<Self> {
        let terms = spec
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.parse::<FeatureTerm>().map_err(Error::Config))
            .collect::<Result<Vec<_>>>()?;
        FeatureMap::new(terms)
    }

    pub fn check(&self, p: usize) -> Result<()> {
        if let Some(t) = self.terms.iter().find(|t| t.max_index().is_some_and(|j| j >= p)) {
            return Err(Error::Config(format!("feature `{t}` refers past the {p} covariates")));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.terms.len()
    }

    pub fn eval(&self, x: &[f64], z: Arm) -> Vec<f64> {
        self.terms.iter().map(|t| t.eval(x, z)).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.to_string()).collect()
    }
}

impl fmt::Display for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.names().join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Convergence tolerance on the largest absolute score component,
    /// evaluated on RMS-scaled features.
    pub tol: f64,
    pub max_iter: usize,
    /// Fit with this ridge penalty from the start instead of only on failure.
    pub ridge: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-8,
            max_iter: 100,
            ridge: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    /// Coefficients on the raw (unscaled) features.
    pub alpha: Vec<f64>,
    /// Model-based standard errors of `alpha`.
    pub alpha_se: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
    pub ridge_lambda: f64,
    /// Largest absolute score component at the returned coefficients.
    pub max_score: f64,
    pub features: FeatureMap,
}

impl LogisticFit {
    pub fn linear_predictor(&self, x: &[f64], z: Arm) -> f64 {
        self.features
            .eval(x, z)
            .iter()
            .zip(&self.alpha)
            .map(|(f, a)| f * a)
            .sum()
    }

    pub fn probability(&self, x: &[f64], z: Arm) -> f64 {
        sigmoid(self.linear_predictor(x, z))
    }
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^eta) without overflow.
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

enum Failure {
    Singular,
    NotConverged { separated: bool, iterations: usize },
}

struct Solution {
    alpha: DVector<f64>,
    cov: DMatrix<f64>,
    iterations: usize,
    max_score: f64,
    deviance: f64,
}

struct Problem {
    g: DMatrix<f64>,
    label: Vec<f64>,
    names: Vec<String>,
    intercept: usize,
}

impl Problem {
    fn penalized_objective(&self, alpha: &DVector<f64>, pen: f64) -> (f64, DVector<f64>) {
        let eta = &self.g * alpha;
        let ll: f64 = eta
            .iter()
            .zip(&self.label)
            .map(|(&e, &y)| y * e - softplus(e))
            .sum();
        let pen_term: f64 = alpha
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != self.intercept)
            .map(|(_, a)| a * a)
            .sum::<f64>();
        (ll - 0.5 * pen * pen_term, eta)
    }

    fn separated(&self, alpha: &DVector<f64>) -> bool {
        (&self.g * alpha).iter().any(|e| e.abs() > SEPARATION_ETA)
    }

    /// Newton-Raphson with step halving. `pen` is `N·λ`.
    fn newton(&self, pen: f64, opts: &FitOptions) -> std::result::Result<Solution, Failure> {
        let (n, m) = self.g.shape();
        let mut alpha = DVector::<f64>::zeros(m);
        let (mut obj, mut eta) = self.penalized_objective(&alpha, pen);
        for it in 0..=opts.max_iter {
            let p: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
            let resid: Vec<f64> = p.iter().zip(&self.label).map(|(pi, y)| y - pi).collect();
            let ones = vec![1.0; n];
            let mut score = linalg::weighted_xty(&self.g, &ones, &resid);
            let curv: Vec<f64> = p.iter().map(|pi| pi * (1.0 - pi)).collect();
            let mut hess = linalg::weighted_gram(&self.g, &curv);
            for j in 0..m {
                if j != self.intercept {
                    score[j] -= pen * alpha[j];
                    hess[(j, j)] += pen;
                }
            }
            let max_score = score.amax();
            let factor = SpdFactor::new(&hess, &self.names).map_err(|_| Failure::Singular)?;
            if max_score <= opts.tol {
                let deviance = -2.0
                    * eta
                        .iter()
                        .zip(&self.label)
                        .map(|(&e, &y)| y * e - softplus(e))
                        .sum::<f64>();
                return Ok(Solution {
                    alpha,
                    cov: factor.inverse(),
                    iterations: it,
                    max_score,
                    deviance,
                });
            }
            if it == opts.max_iter {
                break;
            }
            let step = factor.solve(&score);
            let mut t = 1.0;
            loop {
                let cand = &alpha + &step * t;
                let (cobj, ceta) = self.penalized_objective(&cand, pen);
                if cobj >= obj - 1e-12 * obj.abs() || t < 1e-10 {
                    alpha = cand;
                    obj = cobj;
                    eta = ceta;
                    break;
                }
                t *= 0.5;
            }
        }
        Err(Failure::NotConverged {
            separated: self.separated(&alpha),
            iterations: opts.max_iter,
        })
    }
}

/// Maximum-likelihood fit of target membership on `fmap` features over all
/// subjects of `d`. Falls back to an escalating ridge penalty when the Hessian
/// is singular or the data are separated.
pub fn fit_membership(d: &Dataset, fmap: &FeatureMap, opts: &FitOptions) -> Result<LogisticFit> {
    fmap.check(d.p)?;
    let n = d.len();
    let n_t = d.n_target();
    if n_t == 0 || n_t == n {
        return Err(Error::InvalidInput(
            "membership model needs both target and non-target subjects".into(),
        ));
    }
    let m = fmap.width();
    let raw = DMatrix::from_fn(n, m, |i, j| fmap.terms[j].eval(&d.subjects[i].x, d.subjects[i].z));
    let intercept = fmap
        .terms
        .iter()
        .position(|t| *t == FeatureTerm::Intercept)
        .expect("checked in FeatureMap::new");
    let mut scale = vec![1.0; m];
    for (j, sj) in scale.iter_mut().enumerate() {
        if j == intercept {
            continue;
        }
        let rms = (raw.column(j).iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        if rms == 0.0 || !rms.is_finite() {
            return Err(Error::Singular {
                columns: vec![fmap.terms[j].to_string()],
            });
        }
        *sj = rms;
    }
    let g = DMatrix::from_fn(n, m, |i, j| raw[(i, j)] / scale[j]);
    let problem = Problem {
        g,
        label: d.subjects.iter().map(|s| if s.is_target() { 1.0 } else { 0.0 }).collect(),
        names: fmap.names(),
        intercept,
    };

    let ladder: Vec<f64> = match opts.ridge {
        Some(l) if l > 0.0 => std::iter::once(l)
            .chain(RIDGE_LADDER.iter().copied().filter(|&r| r > l))
            .collect(),
        _ => std::iter::once(0.0).chain(RIDGE_LADDER).collect(),
    };
    let mut last_iter = 0;
    let mut last_lambda = 0.0;
    for (k, &lambda) in ladder.iter().enumerate() {
        match problem.newton(n as f64 * lambda, opts) {
            Ok(sol) if lambda == 0.0 && problem.separated(&sol.alpha) => {
                log::debug!("membership fit: converged onto a separating solution");
            }
            Ok(sol) => {
                let alpha = (0..m).map(|j| sol.alpha[j] / scale[j]).collect();
                let alpha_se = (0..m).map(|j| sol.cov[(j, j)].max(0.0).sqrt() / scale[j]).collect();
                return Ok(LogisticFit {
                    alpha,
                    alpha_se,
                    converged: true,
                    iterations: sol.iterations,
                    deviance: sol.deviance,
                    ridge_lambda: lambda,
                    max_score: sol.max_score,
                    features: fmap.clone(),
                });
            }
            Err(Failure::Singular) => {
                log::debug!("membership fit: singular Hessian at ridge {lambda:e}");
            }
            Err(Failure::NotConverged { separated, iterations }) => {
                last_iter = iterations;
                // Without separation a ridge does not address the cause,
                // unless the caller asked for a penalised fit.
                if !separated && lambda == 0.0 && k == 0 {
                    return Err(Error::NonConvergence {
                        iterations,
                        ridge_lambda: 0.0,
                    });
                }
                log::debug!("membership fit: separation at ridge {lambda:e}");
            }
        }
        last_lambda = lambda;
    }
    Err(Error::NonConvergence {
        iterations: last_iter,
        ridge_lambda: last_lambda,
    })
}

/// Sets every subject's weight to `(N / n_T) · π̂(x, z)`. With `pin_target`,
/// target subjects keep weight one.
pub fn compute_weights(d: &Dataset, fit: &LogisticFit, pin_target: bool) -> Result<Dataset> {
    if !fit.converged {
        return Err(Error::InvalidInput("membership fit did not converge".into()));
    }
    if fit.alpha.len() != fit.features.width() {
        return Err(Error::DesignMismatch("coefficient count differs from feature map".into()));
    }
    fit.features.check(d.p)?;
    let n_t = d.n_target();
    if n_t == 0 {
        return Err(Error::InvalidInput("no target subjects".into()));
    }
    let ratio = d.len() as f64 / n_t as f64;
    let mut out = d.clone();
    for (i, s) in out.subjects.iter_mut().enumerate() {
        let w = if pin_target && s.is_target() {
            1.0
        } else {
            ratio * fit.probability(&s.x, s.z)
        };
        if !w.is_finite() || w < 0.0 {
            return Err(Error::NonFiniteWeight { index: i });
        }
        s.weight = w;
    }
    Ok(out)
}
