//! The four analysis stages wired together: meta-regression, reconstruction,
//! membership weighting and weighted regression.

use serde::{Deserialize, Serialize};

use crate::data::{check_consistent_layout, Dataset, SubjectRecord, TrialSummary};
use crate::density_ratio::{self, FeatureMap, FitOptions, LogisticFit};
use crate::error::{Error, Result};
use crate::meta::{self, MetaFit, MetaTerms};
use crate::reconstruct::{self, ReconstructionConfig};
use crate::wls::{self, Meat, RegressionModel, UnivariateEstimate, WeightedFit};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub meta_terms: MetaTerms,
    pub reconstruction: ReconstructionConfig,
    pub features: FeatureMap,
    pub fit: FitOptions,
    pub pin_target: bool,
    pub model: RegressionModel,
    pub meat: Meat,
}

impl PipelineOptions {
    /// Main-effect meta design, quadratic membership features, covariate-adjusted
    /// outcome model.
    pub fn new(p: usize, reconstruction: ReconstructionConfig) -> Self {
        PipelineOptions {
            meta_terms: MetaTerms::main_effects(p),
            reconstruction,
            features: FeatureMap::quadratic(p),
            fit: FitOptions::default(),
            pin_target: false,
            model: RegressionModel::Covariates,
            meat: Meat::W4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub meta: MetaFit,
    pub logistic: LogisticFit,
    /// Target plus reconstructed subjects, weights filled in.
    pub weighted: Dataset,
    pub fit: WeightedFit,
}

const RECON_STREAM: u64 = 0x7265_636f_6e73;

/// Reconstruction seed derived from a user seed.
pub fn reconstruction_seed(seed: u64) -> u64 {
    crate::rng::substream_seed(seed, RECON_STREAM)
}

pub fn meta_stage(trials: &[TrialSummary], terms: &MetaTerms) -> Result<MetaFit> {
    check_consistent_layout(trials)?;
    let design = meta::build_design(trials, terms)?;
    meta::fit_dl(&design)
}

/// Appends reconstructed subjects of `trials` to the target set.
pub fn pool(target: &Dataset, trials: &[TrialSummary], meta: &MetaFit, cfg: &ReconstructionConfig) -> Result<Dataset> {
    if let Some(t) = trials.iter().find(|t| t.p() != target.p) {
        return Err(Error::DesignMismatch(format!(
            "trial `{}` reports {} covariates, target has {}",
            t.trial_id,
            t.p(),
            target.p
        )));
    }
    let recon: Vec<SubjectRecord> = reconstruct::reconstruct_all(trials, meta, cfg)?;
    let mut pooled = target.clone();
    pooled.subjects.iter_mut().for_each(|s| s.weight = 1.0);
    pooled.extend(recon);
    Ok(pooled)
}

pub fn weight_stage(pooled: &Dataset, opts: &PipelineOptions) -> Result<(LogisticFit, Dataset)> {
    let fit = density_ratio::fit_membership(pooled, &opts.features, &opts.fit)?;
    let weighted = density_ratio::compute_weights(pooled, &fit, opts.pin_target)?;
    Ok((fit, weighted))
}

/// Runs every stage; errors carry the name of the failing stage.
pub fn run(target: &Dataset, trials: &[TrialSummary], opts: &PipelineOptions) -> Result<PipelineOutput> {
    if target.n_target() == 0 {
        return Err(Error::InvalidInput(
            "no target subjects; borrowing-only analyses are not supported".into(),
        ));
    }
    let meta = meta_stage(trials, &opts.meta_terms).map_err(|e| e.in_stage("meta"))?;
    let pooled = pool(target, trials, &meta, &opts.reconstruction).map_err(|e| e.in_stage("reconstruct"))?;
    let (logistic, weighted) = weight_stage(&pooled, opts).map_err(|e| e.in_stage("weights"))?;
    let fit = wls::fit_weighted_regression(&weighted, opts.model, opts.meat).map_err(|e| e.in_stage("estimate"))?;
    Ok(PipelineOutput {
        meta,
        logistic,
        weighted,
        fit,
    })
}

impl PipelineOutput {
    pub fn univariate(&self) -> Result<UnivariateEstimate> {
        wls::estimate_univariate(&self.weighted)
    }
}
