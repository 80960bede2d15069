//! eGFR case study: five trials of an active treatment against control, with
//! the last one (Sawara 2008) serving as the target trial.
//!
//! Only the total change in eGFR (treated minus control, with its SE),
//! follow-up and baseline eGFR are reported. Arm outcomes are derived by
//! assuming the control arm declines by 1 unit per year of follow-up and the
//! treated arm by that amount plus the reported change; the SE is split
//! across arms in proportion to arm size.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Arm, ArmSummary, CovariateFamily, Dataset, SubjectRecord, TrialSummary};
use crate::error::{Error, Result};
use crate::meta::{self, MetaDesign, MetaFit, MetaTerms};
use crate::pipeline::{self, PipelineOptions};
use crate::reconstruct::{Borrow, ReconstructionConfig};
use crate::rng;
use crate::wls::{self, RegressionModel, WeightedFit};

pub const TRIALS_CSV: &str = include_str!("../data/egfr_trials.csv");
pub const ARMS_CSV: &str = include_str!("../data/egfr_arms.csv");
pub const TARGET_STUDY: &str = "Sawara 2008";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgfrTrialRow {
    pub study: String,
    pub n1: usize,
    pub n0: usize,
    pub follow_up_months: f64,
    pub change_mean: f64,
    pub change_se: f64,
    pub baseline_treat_mean: f64,
    pub baseline_treat_sd: f64,
    pub baseline_ctrl_mean: f64,
    pub baseline_ctrl_sd: f64,
}

impl EgfrTrialRow {
    pub fn validate(&self) -> Result<()> {
        if self.n1 == 0 || self.n0 == 0 {
            return Err(Error::InvalidInput(format!("`{}`: arm sizes must be positive", self.study)));
        }
        if !(self.change_se > 0.0 && self.baseline_treat_sd > 0.0 && self.baseline_ctrl_sd > 0.0) {
            return Err(Error::InvalidInput(format!("`{}`: SE and SDs must be positive", self.study)));
        }
        Ok(())
    }
}

/// The bundled trial table, in publication order.
pub fn trials() -> Vec<EgfrTrialRow> {
    let mut rdr = csv::Reader::from_reader(TRIALS_CSV.as_bytes());
    rdr.deserialize()
        .collect::<std::result::Result<Vec<EgfrTrialRow>, _>>()
        .expect("bundled table parses")
}

/// Treatment and control arm summaries for one trial. `y_var` is set so that
/// `y_var / n_j = n_j·SE² / (n_1 + n_0)`.
pub fn derive_arm_summaries(row: &EgfrTrialRow) -> Result<TrialSummary> {
    row.validate()?;
    let total = (row.n1 + row.n0) as f64;
    let control_mean = -row.follow_up_months / 12.0;
    let arm = |arm: Arm, n: usize, y_mean: f64, x_mean: f64, x_sd: f64| {
        let nj = n as f64;
        let mean_var = nj * row.change_se * row.change_se / total;
        ArmSummary {
            trial_id: row.study.clone(),
            arm,
            n,
            y_mean,
            y_var: nj * mean_var,
            x_mean: vec![x_mean],
            x_var: vec![x_sd * x_sd],
            x_family: vec![CovariateFamily::Continuous],
        }
    };
    TrialSummary::new(
        row.study.clone(),
        vec![
            arm(
                Arm::Treatment,
                row.n1,
                control_mean + row.change_mean,
                row.baseline_treat_mean,
                row.baseline_treat_sd,
            ),
            arm(Arm::Control, row.n0, control_mean, row.baseline_ctrl_mean, row.baseline_ctrl_sd),
        ],
    )
}

pub fn all_summaries() -> Result<Vec<TrialSummary>> {
    trials().iter().map(derive_arm_summaries).collect()
}

/// Meta trials (all but the target) and the target's own summary.
pub fn split_target(trials: Vec<TrialSummary>) -> Result<(Vec<TrialSummary>, TrialSummary)> {
    let (target, meta): (Vec<_>, Vec<_>) = trials.into_iter().partition(|t| t.trial_id == TARGET_STUDY);
    let target = target
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidInput(format!("target study `{TARGET_STUDY}` missing")))?;
    Ok((meta, target))
}

/// Meta-regression of arm mean change on arm and baseline eGFR over the
/// non-target trials.
pub fn meta_stage() -> Result<(MetaDesign, MetaFit)> {
    let (meta_trials, _) = split_target(all_summaries()?)?;
    let design = meta::build_design(&meta_trials, &MetaTerms::main_effects(1))?;
    let fit = meta::fit_dl(&design)?;
    Ok((design, fit))
}

/// Tabular rendering of a meta design, for auditing.
pub fn format_design(design: &MetaDesign) -> String {
    let mut s = format!("{:<14} {:>3} {:>12} {:>12}  {}\n", "trial", "arm", "y", "v", design.names.join(" "));
    for r in &design.rows {
        let arm = r.arm.map_or("-".to_string(), |a| a.to_string());
        let cols: Vec<String> = r.design.iter().map(|v| format!("{v:.3}")).collect();
        s.push_str(&format!("{:<14} {:>3} {:>12.6} {:>12.6}  {}\n", r.trial_id, arm, r.y, r.v, cols.join(" ")));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseScenario {
    Target,
    TargetInmass,
    #[serde(rename = "target_2to1")]
    Target2to1,
    #[serde(rename = "target_2to1_inmass_control")]
    Target2to1InmassControl,
    SingleArm,
    SingleArmInmassControl,
}

impl CaseScenario {
    pub const ALL: [CaseScenario; 6] = [
        CaseScenario::Target,
        CaseScenario::TargetInmass,
        CaseScenario::Target2to1,
        CaseScenario::Target2to1InmassControl,
        CaseScenario::SingleArm,
        CaseScenario::SingleArmInmassControl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CaseScenario::Target => "target",
            CaseScenario::TargetInmass => "target_inmass",
            CaseScenario::Target2to1 => "target_2to1",
            CaseScenario::Target2to1InmassControl => "target_2to1_inmass_control",
            CaseScenario::SingleArm => "single_arm",
            CaseScenario::SingleArmInmassControl => "single_arm_inmass_control",
        }
    }

    /// `(n1, n0)` of the simulated target trial; `None` keeps the reported sizes.
    pub fn arm_sizes(self) -> Option<(usize, usize)> {
        match self {
            CaseScenario::Target | CaseScenario::TargetInmass => None,
            CaseScenario::Target2to1 | CaseScenario::Target2to1InmassControl => Some((100, 50)),
            CaseScenario::SingleArm | CaseScenario::SingleArmInmassControl => Some((100, 0)),
        }
    }

    pub fn borrow(self) -> Option<Borrow> {
        match self {
            CaseScenario::TargetInmass => Some(Borrow::BothArms),
            CaseScenario::Target2to1InmassControl | CaseScenario::SingleArmInmassControl => Some(Borrow::ControlOnly),
            _ => None,
        }
    }
}

impl fmt::Display for CaseScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CaseScenario {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        CaseScenario::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = CaseScenario::ALL.iter().map(|c| c.name()).collect();
                format!("unknown scenario `{s}`; expected one of {}", names.join(", "))
            })
    }
}

/// Target subjects drawn independently per arm: outcome and baseline eGFR
/// from normals with the target's derived arm moments.
pub fn simulate_target<R: Rng + ?Sized>(target: &TrialSummary, n1: usize, n0: usize, rng: &mut R) -> Result<Dataset> {
    let mut subjects = Vec::with_capacity(n1 + n0);
    for (arm, n) in [(Arm::Treatment, n1), (Arm::Control, n0)] {
        if n == 0 {
            continue;
        }
        let a = target
            .arm(arm)
            .ok_or_else(|| Error::InvalidInput(format!("target lacks arm {arm}")))?;
        let bad = |e: rand_distr::NormalError| Error::InvalidInput(e.to_string());
        let y = Normal::new(a.y_mean, a.y_var.sqrt()).map_err(bad)?;
        let x = Normal::new(a.x_mean[0], a.x_var[0].sqrt()).map_err(bad)?;
        for _ in 0..n {
            let xi = x.sample(rng);
            subjects.push(SubjectRecord::target(&target.trial_id, arm, y.sample(rng), vec![xi]));
        }
    }
    Ok(Dataset::new(target.trial_id.clone(), target.p(), subjects))
}

/// Treatment-effect row in the layout of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub estimate: f64,
    pub se: f64,
    pub ci: [f64; 2],
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CaseOutcome {
    Fit(Box<WeightedFit>),
    /// Not computable: the target has no control arm and nothing is borrowed.
    NotComputable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyResult {
    pub scenario: CaseScenario,
    pub seed: u64,
    pub n1: usize,
    pub n0: usize,
    pub meta: Option<MetaFit>,
    pub outcome: CaseOutcome,
}

impl CaseStudyResult {
    pub fn effect(&self) -> Option<EffectRow> {
        match &self.outcome {
            CaseOutcome::Fit(f) => {
                let c = f.treatment();
                Some(EffectRow {
                    estimate: c.estimate,
                    se: c.se,
                    ci: [c.ci_low, c.ci_high],
                    t: c.t_value,
                    p: c.p_value,
                    df: f.df,
                })
            }
            CaseOutcome::NotComputable => None,
        }
    }

    /// One results-table row; "NC" fills every cell when no estimate exists.
    pub fn table_row(&self) -> serde_json::Value {
        let mut row = serde_json::json!({
            "scenario": self.scenario.name(),
            "seed": self.seed,
            "n1": self.n1,
            "n0": self.n0,
        });
        let cells = match self.effect() {
            Some(e) => serde_json::json!({
                "estimate": e.estimate, "se": e.se, "ci": e.ci, "t": e.t, "p": e.p,
            }),
            None => serde_json::json!({
                "estimate": "NC", "se": "NC", "ci": "NC", "t": "NC", "p": "NC",
            }),
        };
        if let (Some(r), Some(c)) = (row.as_object_mut(), cells.as_object()) {
            r.extend(c.clone());
        }
        row
    }
}

const TARGET_STREAM: u64 = 0x7461_7267_6574;

/// Meta trials and the simulated target trial of `scenario`.
pub fn scenario_inputs(scenario: CaseScenario, seed: u64) -> Result<(Vec<TrialSummary>, Dataset)> {
    let (meta_trials, target_summary) = split_target(all_summaries()?)?;
    let (n1, n0) = scenario.arm_sizes().unwrap_or_else(|| {
        let n = |a| target_summary.arm(a).map_or(0, |s| s.n);
        (n(Arm::Treatment), n(Arm::Control))
    });
    let mut rng = rng::substream(seed, TARGET_STREAM);
    let target = simulate_target(&target_summary, n1, n0, &mut rng)?;
    Ok((meta_trials, target))
}

pub fn run_case_study(scenario: CaseScenario, seed: u64) -> Result<CaseStudyResult> {
    let (meta_trials, target) = scenario_inputs(scenario, seed)?;
    let n = |a| target.subjects.iter().filter(|s| s.z == a).count();
    let (n1, n0) = (n(Arm::Treatment), n(Arm::Control));
    let result = |meta, outcome| CaseStudyResult {
        scenario,
        seed,
        n1,
        n0,
        meta,
        outcome,
    };
    match scenario.borrow() {
        None => match wls::fit_weighted_regression(&target, RegressionModel::Covariates, Default::default()) {
            Ok(fit) => Ok(result(None, CaseOutcome::Fit(Box::new(fit)))),
            Err(Error::ArmUnestimable { .. }) => Ok(result(None, CaseOutcome::NotComputable)),
            Err(e) => Err(e),
        },
        Some(borrow) => {
            let recon = ReconstructionConfig::with_seed(pipeline::reconstruction_seed(seed), borrow);
            let opts = PipelineOptions::new(1, recon);
            let out = pipeline::run(&target, &meta_trials, &opts)?;
            Ok(result(Some(out.meta), CaseOutcome::Fit(Box::new(out.fit))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{self, Format};

    fn row(study: &str) -> EgfrTrialRow {
        trials().into_iter().find(|r| r.study == study).unwrap()
    }

    #[test]
    fn table_has_five_trials() {
        let t = trials();
        assert_eq!(t.len(), 5);
        assert_eq!(t[0].study, "Yasuda 2004");
        assert_eq!(t[4].study, TARGET_STUDY);
    }

    #[test]
    fn yasuda_derivation() {
        let s = derive_arm_summaries(&row("Yasuda 2004")).unwrap();
        let t = s.arm(Arm::Treatment).unwrap();
        let c = s.arm(Arm::Control).unwrap();
        assert_eq!(c.y_mean, -1.0);
        assert_eq!(t.y_mean, -3.0);
        assert!((t.mean_variance() - 0.1755).abs() < 1e-12);
        assert!((c.mean_variance() - 41.0 * 0.36 / 80.0).abs() < 1e-12);
        assert_eq!(t.x_mean, vec![59.0]);
        assert!((c.x_var[0] - 31.2 * 31.2).abs() < 1e-9);
    }

    #[test]
    fn zero_change_gives_equal_means() {
        let mut r = row("Yasuda 2004");
        r.change_mean = 0.0;
        let s = derive_arm_summaries(&r).unwrap();
        assert_eq!(s.arms[0].y_mean, -1.0);
        assert_eq!(s.arms[1].y_mean, -1.0);
    }

    #[test]
    fn rahman_control_mean() {
        let s = derive_arm_summaries(&row("Rahman 2008")).unwrap();
        assert!((s.arm(Arm::Control).unwrap().y_mean + 58.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn bundled_arm_file_matches_derivation() {
        let bundled = io::read_summaries_from(ARMS_CSV.as_bytes(), Format::Csv).unwrap();
        let derived = all_summaries().unwrap();
        assert_eq!(bundled.len(), derived.len());
        for (b, d) in bundled.iter().zip(&derived) {
            assert_eq!(b.trial_id, d.trial_id);
            for (x, y) in b.arms.iter().zip(&d.arms) {
                assert_eq!((x.arm, x.n), (y.arm, y.n));
                assert!((x.y_mean - y.y_mean).abs() < 1e-12);
                assert!((x.y_var / y.y_var - 1.0).abs() < 1e-12);
                assert!((x.x_var[0] / y.x_var[0] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn meta_stage_is_deterministic() {
        let (d, a) = meta_stage().unwrap();
        let (_, b) = meta_stage().unwrap();
        assert_eq!(a, b);
        assert_eq!(d.len(), 8);
        assert!(format_design(&d).contains("Koren 2009"));
    }

    #[test]
    fn single_arm_without_borrowing_is_nc() {
        let r = run_case_study(CaseScenario::SingleArm, 1).unwrap();
        assert_eq!(r.outcome, CaseOutcome::NotComputable);
        assert_eq!(r.table_row()["estimate"], "NC");
        assert_eq!((r.n1, r.n0), (100, 0));
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in CaseScenario::ALL {
            assert_eq!(s.name().parse::<CaseScenario>().unwrap(), s);
            assert_eq!(serde_json::to_value(s).unwrap(), s.name());
        }
    }

    #[test]
    fn borrowing_scenarios_run() {
        for s in [CaseScenario::TargetInmass, CaseScenario::SingleArmInmassControl] {
            let r = run_case_study(s, 3).unwrap();
            let e = r.effect().unwrap();
            assert!(e.estimate.is_finite() && e.se > 0.0, "{s}: {e:?}");
        }
    }
}
