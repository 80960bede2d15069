//! Domain types shared by every pipeline stage.
//!
//! All types are plain values: they are built once, validated, and then only
//! read. Aggregate statistics live in [`ArmSummary`]/[`TrialSummary`]; subject
//! level rows (observed target subjects and reconstructed pseudo-subjects) live
//! in [`SubjectRecord`] collected into a [`Dataset`].

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Treatment indicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Arm {
    Control,
    Treatment,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Treatment, Arm::Control];

    pub fn indicator(self) -> f64 {
        match self {
            Arm::Control => 0.0,
            Arm::Treatment => 1.0,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Arm::Control => 0,
            Arm::Treatment => 1,
        }
    }
}

impl TryFrom<u8> for Arm {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        match v {
            0 => Ok(Arm::Control),
            1 => Ok(Arm::Treatment),
            other => Err(format!("arm indicator must be 0 or 1, got {other}")),
        }
    }
}

impl From<Arm> for u8 {
    fn from(a: Arm) -> u8 {
        a.as_u8()
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateFamily {
    #[default]
    Continuous,
    Binary,
}

impl std::str::FromStr for CovariateFamily {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "continuous" | "" => Ok(CovariateFamily::Continuous),
            "binary" => Ok(CovariateFamily::Binary),
            other => Err(format!("unknown covariate family `{other}`")),
        }
    }
}

impl fmt::Display for CovariateFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovariateFamily::Continuous => f.write_str("continuous"),
            CovariateFamily::Binary => f.write_str("binary"),
        }
    }
}

/// Aggregate statistics of one trial arm.
///
/// `y_var` and `x_var` are variances of individual observations, not squared
/// standard errors of the mean. Covariate covariance is diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub trial_id: String,
    pub arm: Arm,
    pub n: usize,
    pub y_mean: f64,
    pub y_var: f64,
    pub x_mean: Vec<f64>,
    pub x_var: Vec<f64>,
    pub x_family: Vec<CovariateFamily>,
}

impl ArmSummary {
    pub fn p(&self) -> usize {
        self.x_mean.len()
    }

    /// Variance of the arm outcome mean, `y_var / n`.
    pub fn mean_variance(&self) -> f64 {
        self.y_var / self.n as f64
    }

    pub fn validate(&self) -> Result<()> {
        let neg = |field: &str| Error::NegativeVariance {
            trial_id: self.trial_id.clone(),
            arm: self.arm.as_u8(),
            field: field.to_string(),
        };
        if self.n == 0 {
            return Err(Error::InvalidInput(format!(
                "trial `{}` arm {} has n = 0; omit the arm instead",
                self.trial_id, self.arm
            )));
        }
        if self.x_var.len() != self.p() || self.x_family.len() != self.p() {
            return Err(Error::Schema(format!(
                "trial `{}` arm {}: covariate vectors have inconsistent lengths",
                self.trial_id, self.arm
            )));
        }
        if !self.y_mean.is_finite() || !self.y_var.is_finite() {
            return Err(Error::InvalidInput(format!(
                "trial `{}` arm {}: non-finite outcome statistic",
                self.trial_id, self.arm
            )));
        }
        if self.y_var < 0.0 {
            return Err(neg("y_var"));
        }
        for j in 0..self.p() {
            if !self.x_mean[j].is_finite() || !self.x_var[j].is_finite() {
                return Err(Error::InvalidInput(format!(
                    "trial `{}` arm {}: non-finite statistic for covariate x{}",
                    self.trial_id,
                    self.arm,
                    j + 1
                )));
            }
            if self.x_var[j] < 0.0 {
                return Err(neg(&format!("x{}_var", j + 1)));
            }
            if self.x_family[j] == CovariateFamily::Binary && !(0.0..=1.0).contains(&self.x_mean[j]) {
                return Err(Error::InvalidInput(format!(
                    "trial `{}` arm {}: binary covariate x{} has mean {} outside [0, 1]",
                    self.trial_id,
                    self.arm,
                    j + 1,
                    self.x_mean[j]
                )));
            }
        }
        Ok(())
    }
}

/// One trial: one or two arms, at most one per arm value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial_id: String,
    pub arms: Vec<ArmSummary>,
}

impl TrialSummary {
    pub fn new(trial_id: impl Into<String>, arms: Vec<ArmSummary>) -> Result<Self> {
        let trial_id = trial_id.into();
        if arms.is_empty() || arms.len() > 2 {
            return Err(Error::Schema(format!(
                "trial `{trial_id}` must have one or two arms, found {}",
                arms.len()
            )));
        }
        let mut seen = HashSet::new();
        for a in &arms {
            if a.trial_id != trial_id {
                return Err(Error::Schema(format!(
                    "arm labelled `{}` inside trial `{trial_id}`",
                    a.trial_id
                )));
            }
            if !seen.insert(a.arm) {
                return Err(Error::DuplicateArm {
                    trial_id: trial_id.clone(),
                    arm: a.arm.as_u8(),
                });
            }
            a.validate()?;
        }
        if arms.iter().any(|a| a.p() != arms[0].p() || a.x_family != arms[0].x_family) {
            return Err(Error::Schema(format!(
                "trial `{trial_id}`: covariate dimension or families differ between arms"
            )));
        }
        let mut arms = arms;
        arms.sort_by_key(|a| std::cmp::Reverse(a.arm));
        Ok(TrialSummary { trial_id, arms })
    }

    pub fn arm(&self, arm: Arm) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == arm)
    }

    pub fn p(&self) -> usize {
        self.arms[0].p()
    }
}

/// Checks that all trials share one covariate layout.
pub fn check_consistent_layout(trials: &[TrialSummary]) -> Result<()> {
    if let Some(first) = trials.first() {
        let fam = &first.arms[0].x_family;
        for t in trials {
            if &t.arms[0].x_family != fam {
                return Err(Error::Schema(format!(
                    "trial `{}` has covariate layout {:?}, expected {:?}",
                    t.trial_id, t.arms[0].x_family, fam
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Target,
    Reconstructed,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Target => f.write_str("target"),
            Source::Reconstructed => f.write_str("reconstructed"),
        }
    }
}

impl std::str::FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "target" => Ok(Source::Target),
            "reconstructed" => Ok(Source::Reconstructed),
            other => Err(format!("unknown source `{other}`")),
        }
    }
}

/// One individual row, observed or reconstructed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub trial_id: String,
    pub z: Arm,
    pub y: f64,
    pub x: Vec<f64>,
    #[serde(default = "unit_weight")]
    pub weight: f64,
    pub source: Source,
}

fn unit_weight() -> f64 {
    1.0
}

impl SubjectRecord {
    pub fn target(trial_id: impl Into<String>, z: Arm, y: f64, x: Vec<f64>) -> Self {
        SubjectRecord {
            trial_id: trial_id.into(),
            z,
            y,
            x,
            weight: 1.0,
            source: Source::Target,
        }
    }

    pub fn is_target(&self) -> bool {
        self.source == Source::Target
    }
}

/// The pooled analysis set: target subjects plus any reconstructed ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub subjects: Vec<SubjectRecord>,
    pub p: usize,
    pub target_id: String,
}

impl Dataset {
    pub fn new(target_id: impl Into<String>, p: usize, subjects: Vec<SubjectRecord>) -> Self {
        Dataset {
            subjects,
            p,
            target_id: target_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn n_target(&self) -> usize {
        self.subjects.iter().filter(|s| s.is_target()).count()
    }

    pub fn extend(&mut self, more: impl IntoIterator<Item = SubjectRecord>) {
        self.subjects.extend(more);
    }

    pub fn weights(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.weight).collect()
    }

    /// Keeps only target subjects.
    pub fn target_only(&self) -> Dataset {
        Dataset {
            subjects: self.subjects.iter().filter(|s| s.is_target()).cloned().collect(),
            p: self.p,
            target_id: self.target_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    /// Weight is negative, infinite or NaN.
    UnboundedWeight(f64),
    DimensionMismatch { expected: usize, found: usize },
    NonFinite(&'static str),
    NoTargetSubjects,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Index into `Dataset::subjects`, or `None` for dataset-level problems.
    pub record: Option<usize>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at = match self.record {
            Some(i) => format!("subject {i}"),
            None => "dataset".to_string(),
        };
        match &self.kind {
            ViolationKind::UnboundedWeight(w) => write!(
                f,
                "{at}: weight {w} violates density-ratio boundedness (must be finite and >= 0)"
            ),
            ViolationKind::DimensionMismatch { expected, found } => {
                write!(f, "{at}: covariate dimension {found}, expected {expected}")
            }
            ViolationKind::NonFinite(what) => write!(f, "{at}: non-finite {what}"),
            ViolationKind::NoTargetSubjects => write!(f, "{at}: no target subjects"),
        }
    }
}

/// Lists every invariant violation in `d`; empty means valid.
pub fn validate_dataset(d: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, s) in d.subjects.iter().enumerate() {
        if !(s.weight.is_finite() && s.weight >= 0.0) {
            out.push(Violation {
                record: Some(i),
                kind: ViolationKind::UnboundedWeight(s.weight),
            });
        }
        if s.x.len() != d.p {
            out.push(Violation {
                record: Some(i),
                kind: ViolationKind::DimensionMismatch {
                    expected: d.p,
                    found: s.x.len(),
                },
            });
        }
        if !s.y.is_finite() {
            out.push(Violation {
                record: Some(i),
                kind: ViolationKind::NonFinite("outcome"),
            });
        }
        if s.x.iter().any(|v| !v.is_finite()) {
            out.push(Violation {
                record: Some(i),
                kind: ViolationKind::NonFinite("covariate"),
            });
        }
    }
    if !d.subjects.iter().any(|s| s.is_target()) {
        out.push(Violation {
            record: None,
            kind: ViolationKind::NoTargetSubjects,
        });
    }
    out
}
