//! Command-line front end: one subcommand per analysis stage plus the
//! end-to-end `pipeline`, the Monte-Carlo `simulate` driver and the eGFR
//! `case-study`.

pub mod commands;
pub mod config;
pub mod stamp;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use inmass_core::casestudy::CaseScenario;
use inmass_core::reconstruct::Borrow;
use inmass_core::simulate::{Allocation, CovariateDist, ModelSpec};
use inmass_core::wls::Meat;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "inmass", version, about = "Target-trial treatment effects from meta-analysis aggregates")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GlobalArgs {
    /// Seed for every random draw; required by stochastic stages.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file (or directory for `pipeline` and `case-study --export`);
    /// standard output when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Arm-level random-effects meta-regression (DerSimonian-Laird).
    Meta(MetaArgs),
    /// Pseudo individual data from arm summaries and a meta-regression fit.
    Reconstruct(ReconstructArgs),
    /// Density-ratio weights from a target-membership logistic model.
    Weights(WeightsArgs),
    /// Weighted treatment-effect estimate from weighted individual data.
    Estimate(EstimateArgs),
    /// Monte-Carlo comparison against the target-only analysis.
    Simulate(SimulateArgs),
    /// The eGFR worked example.
    CaseStudy(CaseStudyArgs),
    /// All four stages from a TOML configuration.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MetaArgs {
    /// Arm summary table (CSV or JSON).
    #[arg(long)]
    pub summaries: PathBuf,
    /// Trial ids to leave out, e.g. the target trial.
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
    /// Add `arm × covariate` columns to the design.
    #[arg(long)]
    pub interaction: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub summaries: PathBuf,
    /// Meta-regression fit written by `meta`.
    #[arg(long)]
    pub meta: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
    /// both_arms or control_only.
    #[arg(long, default_value = "both_arms")]
    pub borrow: Borrow,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct WeightsArgs {
    /// Target plus reconstructed individual data.
    #[arg(long)]
    pub ipd: PathBuf,
    /// Target trial id, needed when the file has no `source` column.
    #[arg(long)]
    pub target: Option<String>,
    /// Comma-separated membership-model terms, e.g. `intercept,x1,x1^2,z`.
    #[arg(long, default_value = "intercept,x1,x1^2")]
    pub features: String,
    /// Keep target subjects at weight one.
    #[arg(long)]
    pub pin_target_weights: bool,
    /// Ridge penalty to start from instead of an unpenalized fit.
    #[arg(long)]
    pub ridge: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EstimateArgs {
    /// Weighted individual data written by `weights`.
    #[arg(long)]
    pub ipd: PathBuf,
    /// Weighted difference in arm means instead of the regression.
    #[arg(long)]
    pub univariate: bool,
    /// Adjust for the covariates.
    #[arg(long)]
    pub covariates: bool,
    /// Also include `treatment × covariate` terms (implies --covariates).
    #[arg(long)]
    pub interaction: bool,
    /// Sandwich meat: w4 (w⁴) or hc0 (w²).
    #[arg(long, default_value = "w4")]
    pub meat: Meat,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Numbers of meta trials; comma-separated values form a grid.
    #[arg(long = "K", value_delimiter = ',', default_value = "10")]
    pub k: Vec<usize>,
    /// Base trial sizes.
    #[arg(long, value_delimiter = ',', default_value = "100")]
    pub n: Vec<usize>,
    /// normal or chisq2.
    #[arg(long, value_delimiter = ',', default_value = "normal")]
    pub dist: Vec<CovariateDist>,
    /// one_to_one, three_to_one or single_arm.
    #[arg(long, value_delimiter = ',', default_value = "one_to_one")]
    pub alloc: Vec<Allocation>,
    /// identified or misidentified.
    #[arg(long, value_delimiter = ',', default_value = "identified")]
    pub model: Vec<ModelSpec>,
    /// both_arms or control_only.
    #[arg(long, value_delimiter = ',', default_value = "both_arms")]
    pub borrow: Vec<Borrow>,
    /// Replications per cell.
    #[arg(long, default_value_t = 500)]
    pub reps: usize,
    #[arg(long, default_value = "w4")]
    pub meat: Meat,
    /// Use a main-effects-only meta-regression design.
    #[arg(long)]
    pub main_effects_meta: bool,
    #[arg(long)]
    pub pin_target_weights: bool,
    /// Worker threads; all cores when omitted. Results do not depend on it.
    #[arg(long)]
    #[serde(skip)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CaseStudyArgs {
    /// Scenario name, or `all`.
    #[arg(long, default_value = "all")]
    pub scenario: String,
    /// Print only the meta-regression of the non-target trials.
    #[arg(long)]
    pub meta_only: bool,
    /// Write the scenario's inputs and a pipeline config to `--out` instead
    /// of running it.
    #[arg(long)]
    pub export: bool,
}

impl CaseStudyArgs {
    pub fn scenarios(&self) -> Result<Vec<CaseScenario>, String> {
        if self.scenario == "all" {
            Ok(CaseScenario::ALL.to_vec())
        } else {
            Ok(vec![self.scenario.parse()?])
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PipelineArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: PathBuf,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.global.log_level)
        .format_timestamp(None)
        .try_init();
    match commands::run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.class());
            e.class().exit_code()
        }
    }
}
