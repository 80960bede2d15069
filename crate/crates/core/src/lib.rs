//! Target-trial treatment effects from meta-analysis aggregates.
//!
//! The method runs in four stages:
//!
//! 1. [`meta`]: arm-level random-effects meta-regression of outcome means on
//!    arm and covariate means.
//! 2. [`reconstruct`]: pseudo individual data drawn from each trial's reported
//!    moments and the fitted meta-regression.
//! 3. [`density_ratio`]: importance weights from a logistic model of
//!    target-trial membership.
//! 4. [`wls`]: weighted estimation of the treatment effect on the target
//!    population.
//!
//! [`pipeline`] chains the stages; [`simulate`] and [`casestudy`] are the
//! Monte-Carlo harness and the eGFR worked example.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod casestudy;
pub mod data;
pub mod density_ratio;
pub mod error;
pub mod io;
pub mod linalg;
pub mod meta;
pub mod pipeline;
pub mod reconstruct;
pub mod rng;
pub mod simulate;
pub mod stats;
pub mod wls;

pub use data::{validate_dataset, Arm, ArmSummary, CovariateFamily, Dataset, Source, SubjectRecord, TrialSummary};
pub use density_ratio::{FeatureMap, FeatureTerm, FitOptions, LogisticFit};
pub use error::{Error, ErrorClass, Result};
pub use meta::{MetaDesign, MetaFit, MetaTerms};
pub use pipeline::{PipelineOptions, PipelineOutput};
pub use reconstruct::{Borrow, ReconstructionConfig};
pub use wls::{Meat, RegressionModel, UnivariateEstimate, WeightedFit};
