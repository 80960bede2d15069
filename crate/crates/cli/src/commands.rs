use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use inmass_core::casestudy::{self, CaseScenario};
use inmass_core::data::{Dataset, TrialSummary};
use inmass_core::density_ratio::{self, FeatureMap, FitOptions};
use inmass_core::io::{self, Format, IpdColumns};
use inmass_core::meta::{self, MetaFit, MetaTerms};
use inmass_core::pipeline::{self, PipelineOptions};
use inmass_core::reconstruct::{self, ReconstructionConfig};
use inmass_core::simulate::{self, ScenarioConfig};
use inmass_core::wls::{self, RegressionModel, WeightedFit};
use inmass_core::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::stamp::Stamp;
use crate::{
    CaseStudyArgs, Cli, Command, EstimateArgs, GlobalArgs, MetaArgs, PipelineArgs, ReconstructArgs, SimulateArgs,
    WeightsArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Meta(a) => meta_cmd(g, a),
        Command::Reconstruct(a) => reconstruct_cmd(g, a),
        Command::Weights(a) => weights_cmd(g, a),
        Command::Estimate(a) => estimate_cmd(g, a),
        Command::Simulate(a) => simulate_cmd(g, a),
        Command::CaseStudy(a) => case_study_cmd(g, a),
        Command::Pipeline(a) => pipeline_cmd(g, a),
    }
}

fn require_seed(g: &GlobalArgs, what: &str) -> Result<u64> {
    g.seed
        .ok_or_else(|| Error::Config(format!("{what} is stochastic; pass --seed")))
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("input `{}` does not exist", p.display())))
    }
}

fn write_out(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, bytes)?;
        }
        None => std::io::stdout().lock().write_all(bytes)?,
    }
    Ok(())
}

fn json_bytes(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("value serializes");
    s.push(b'\n');
    s
}

fn out_format(out: Option<&Path>) -> Format {
    out.map_or(Format::Csv, Format::from_path)
}

fn load_summaries(path: &Path, exclude: &[String]) -> Result<Vec<TrialSummary>> {
    require_file(path)?;
    let trials = io::read_summaries(path, Format::from_path(path))?;
    let kept: Vec<_> = trials.into_iter().filter(|t| !exclude.contains(&t.trial_id)).collect();
    if kept.is_empty() {
        return Err(Error::NoTrials);
    }
    Ok(kept)
}

fn meta_json(fit: &MetaFit, stamp: &Stamp) -> Value {
    let mut v = serde_json::to_value(fit).expect("fit serializes");
    v["coefficients"] = serde_json::to_value(meta::meta_se(fit)).expect("rows serialize");
    stamp.attach(v)
}

fn ipd_bytes(d: &Dataset, cols: IpdColumns, format: Format, stamp: &Stamp) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    io::write_ipd_to(&mut buf, d, cols, format, Some(&stamp.lines()))?;
    Ok(buf)
}

fn meta_cmd(g: &GlobalArgs, a: &MetaArgs) -> Result<()> {
    let trials = load_summaries(&a.summaries, &a.exclude)?;
    let p = trials[0].p();
    let terms = if a.interaction {
        MetaTerms::with_interactions(p)
    } else {
        MetaTerms::main_effects(p)
    };
    let fit = pipeline::meta_stage(&trials, &terms)?;
    let stamp = Stamp::new(a, None);
    write_out(g.out.as_deref(), &json_bytes(&meta_json(&fit, &stamp)))
}

fn reconstruct_cmd(g: &GlobalArgs, a: &ReconstructArgs) -> Result<()> {
    let seed = require_seed(g, "reconstruction")?;
    let trials = load_summaries(&a.summaries, &a.exclude)?;
    require_file(&a.meta)?;
    let fit: MetaFit = serde_json::from_slice(&fs::read(&a.meta)?)?;
    let cfg = ReconstructionConfig::with_seed(pipeline::reconstruction_seed(seed), a.borrow);
    let recon = reconstruct::reconstruct_all(&trials, &fit, &cfg)?;
    let d = Dataset::new("", trials[0].p(), recon);
    let stamp = Stamp::new(a, Some(seed));
    let cols = IpdColumns {
        source: true,
        weight: false,
    };
    write_out(g.out.as_deref(), &ipd_bytes(&d, cols, out_format(g.out.as_deref()), &stamp)?)
}

fn weights_cmd(g: &GlobalArgs, a: &WeightsArgs) -> Result<()> {
    require_file(&a.ipd)?;
    let d = io::read_ipd(&a.ipd, Format::from_path(&a.ipd), a.target.as_deref())?;
    let features = FeatureMap::parse(&a.features)?;
    let opts = FitOptions {
        ridge: a.ridge,
        ..Default::default()
    };
    let fit = density_ratio::fit_membership(&d, &features, &opts)?;
    log::info!(
        "membership fit: {} iterations, ridge {:e}, deviance {:.4}",
        fit.iterations,
        fit.ridge_lambda,
        fit.deviance
    );
    let w = density_ratio::compute_weights(&d, &fit, a.pin_target_weights)?;
    let stamp = Stamp::new(a, None);
    write_out(g.out.as_deref(), &ipd_bytes(&w, IpdColumns::ALL, out_format(g.out.as_deref()), &stamp)?)
}

fn fit_json(fit: &WeightedFit) -> Value {
    let t = fit.treatment();
    let coefficients: Vec<_> = fit.names.iter().filter_map(|n| fit.coefficient(n)).collect();
    json!({
        "model": fit.model,
        "meat": fit.meat,
        "estimate": t.estimate,
        "se": t.se,
        "ci": [t.ci_low, t.ci_high],
        "t": t.t_value,
        "p": t.p_value,
        "df": fit.df,
        "n_tilde": [fit.n_tilde_1, fit.n_tilde_0],
        "coefficients": coefficients,
    })
}

fn estimate_cmd(g: &GlobalArgs, a: &EstimateArgs) -> Result<()> {
    require_file(&a.ipd)?;
    let d = io::read_ipd(&a.ipd, Format::from_path(&a.ipd), None)?;
    let v = if a.univariate {
        let e = wls::estimate_univariate(&d)?;
        json!({
            "estimator": "weighted_difference",
            "estimate": e.delta_r,
            "var": e.var_r,
            "se": e.se,
            "ci": [e.ci_low, e.ci_high],
            "z": e.z_stat,
            "p": e.p_value,
            "n_tilde": [e.n_tilde_1, e.n_tilde_0],
        })
    } else {
        let model = RegressionModel::from_flags(a.covariates || a.interaction, a.interaction);
        fit_json(&wls::fit_weighted_regression(&d, model, a.meat)?)
    };
    let stamp = Stamp::new(a, None);
    write_out(g.out.as_deref(), &json_bytes(&stamp.attach(v)))
}

pub fn simulate_configs(a: &SimulateArgs, seed: u64) -> Vec<ScenarioConfig> {
    let mut cells = Vec::new();
    for &k in &a.k {
        for &n in &a.n {
            for &covariate_dist in &a.dist {
                for &allocation in &a.alloc {
                    for &model_spec in &a.model {
                        for &borrow in &a.borrow {
                            cells.push(ScenarioConfig {
                                k,
                                n,
                                covariate_dist,
                                allocation,
                                model_spec,
                                borrow,
                                replications: a.reps,
                                base_seed: seed,
                                meat: a.meat,
                                meta_interaction: !a.main_effects_meta,
                                pin_target_weights: a.pin_target_weights,
                            });
                        }
                    }
                }
            }
        }
    }
    cells
}

fn simulate_cmd(g: &GlobalArgs, a: &SimulateArgs) -> Result<()> {
    let seed = require_seed(g, "simulation")?;
    let cells = simulate_configs(a, seed);
    for c in &cells {
        c.validate()?;
    }
    let run_all = || -> Result<Vec<simulate::CellResult>> {
        cells
            .iter()
            .map(|c| {
                log::info!("running {} ({} replications)", c.label(), c.replications);
                simulate::run_cell(c)
            })
            .collect()
    };
    let results = match a.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run_all)?,
        None => run_all()?,
    };
    let mut buf = Vec::new();
    simulate::write_cell_csv(&mut buf, &results)?;
    write_out(g.out.as_deref(), &buf)?;
    if let Some(out) = &g.out {
        let stamp = Stamp::new(a, Some(seed));
        let side = json!({ "cells": cells, "stamp": stamp });
        let mut name = out.as_os_str().to_owned();
        name.push(".stamp.json");
        fs::write(PathBuf::from(name), json_bytes(&side))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ScenarioStamp<'a> {
    scenario: &'a str,
}

fn case_study_cmd(g: &GlobalArgs, a: &CaseStudyArgs) -> Result<()> {
    if a.meta_only {
        let (design, fit) = casestudy::meta_stage()?;
        let stamp = Stamp::new(&"case-study meta", None);
        let mut v = meta_json(&fit, &stamp);
        v["design"] = serde_json::to_value(&design.rows)?;
        return write_out(g.out.as_deref(), &json_bytes(&v));
    }
    let seed = require_seed(g, "the case study")?;
    let scenarios = a.scenarios().map_err(Error::Config)?;
    if a.export {
        let [scenario] = scenarios[..] else {
            return Err(Error::Config("--export needs a single --scenario".into()));
        };
        let dir = g
            .out
            .as_deref()
            .ok_or_else(|| Error::Config("--export needs --out <dir>".into()))?;
        return export_case_study(scenario, seed, dir);
    }
    let rows = scenarios
        .iter()
        .map(|&s| {
            let r = casestudy::run_case_study(s, seed)?;
            let stamp = Stamp::new(&ScenarioStamp { scenario: s.name() }, Some(seed));
            Ok(stamp.attach(r.table_row()))
        })
        .collect::<Result<Vec<_>>>()?;
    let v = if rows.len() == 1 {
        rows.into_iter().next().expect("one row")
    } else {
        Value::Array(rows)
    };
    write_out(g.out.as_deref(), &json_bytes(&v))
}

/// Writes the meta summaries, the simulated target data and a pipeline
/// config that reproduces `scenario`.
fn export_case_study(scenario: CaseScenario, seed: u64, dir: &Path) -> Result<()> {
    let borrow = scenario.borrow().ok_or_else(|| {
        Error::Config(format!("scenario `{scenario}` does not borrow; nothing to export"))
    })?;
    fs::create_dir_all(dir)?;
    let (meta_trials, target) = casestudy::scenario_inputs(scenario, seed)?;
    io::write_summaries(&dir.join("summaries.csv"), &meta_trials, Format::Csv)?;
    let cols = IpdColumns {
        source: true,
        weight: false,
    };
    io::write_ipd(&dir.join("target.csv"), &target, cols, Format::Csv, None)?;
    let cfg = PipelineConfig {
        target_ipd: "target.csv".into(),
        summaries: "summaries.csv".into(),
        target_id: None,
        exclude: Vec::new(),
        seed,
        out: "out".into(),
        borrow,
        features: "intercept,x1,x1^2".into(),
        meat: Default::default(),
        model: RegressionModel::Covariates,
        meta_interaction: false,
        pin_target_weights: false,
        ridge: None,
    };
    fs::write(dir.join("pipeline.toml"), cfg.to_toml())?;
    Ok(())
}

fn pipeline_cmd(g: &GlobalArgs, a: &PipelineArgs) -> Result<()> {
    let mut cfg = PipelineConfig::load(&a.config)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    cfg.check_inputs()?;
    let report = run_pipeline(&cfg)?;
    print!("{report}");
    Ok(())
}

/// Runs every stage, writing each artifact as soon as its stage finishes.
/// Returns the human-readable summary.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<String> {
    let features = FeatureMap::parse(&cfg.features)?;
    let stamp = Stamp::new(cfg, Some(cfg.seed));
    fs::create_dir_all(&cfg.out)?;
    let out = |name: &str| cfg.out.join(name);

    let load = || -> Result<(Dataset, Vec<TrialSummary>)> {
        let target = io::read_ipd(&cfg.target_ipd, Format::from_path(&cfg.target_ipd), cfg.target_id.as_deref())?;
        let target = target.target_only();
        let trials = load_summaries(&cfg.summaries, &cfg.exclude)?;
        Ok((target, trials))
    };
    let (target, trials) = load().map_err(|e| e.in_stage("load"))?;
    if target.is_empty() {
        return Err(Error::InvalidInput("target IPD has no target rows".into()).in_stage("load"));
    }
    let p = target.p;
    let opts = PipelineOptions {
        meta_terms: if cfg.meta_interaction {
            MetaTerms::with_interactions(p)
        } else {
            MetaTerms::main_effects(p)
        },
        reconstruction: ReconstructionConfig::with_seed(pipeline::reconstruction_seed(cfg.seed), cfg.borrow),
        features,
        fit: FitOptions {
            ridge: cfg.ridge,
            ..Default::default()
        },
        pin_target: cfg.pin_target_weights,
        model: cfg.model,
        meat: cfg.meat,
    };

    let meta = pipeline::meta_stage(&trials, &opts.meta_terms).map_err(|e| e.in_stage("meta"))?;
    fs::write(out("meta.json"), json_bytes(&meta_json(&meta, &stamp)))?;

    let pooled = pipeline::pool(&target, &trials, &meta, &opts.reconstruction).map_err(|e| e.in_stage("reconstruct"))?;
    let recon = Dataset::new(
        pooled.target_id.clone(),
        p,
        pooled.subjects.iter().filter(|s| !s.is_target()).cloned().collect(),
    );
    let cols = IpdColumns {
        source: true,
        weight: false,
    };
    fs::write(out("reconstructed.csv"), ipd_bytes(&recon, cols, Format::Csv, &stamp)?)?;

    let (logistic, weighted) = pipeline::weight_stage(&pooled, &opts).map_err(|e| e.in_stage("weights"))?;
    fs::write(out("weighted.csv"), ipd_bytes(&weighted, IpdColumns::ALL, Format::Csv, &stamp)?)?;

    let fit = wls::fit_weighted_regression(&weighted, opts.model, opts.meat).map_err(|e| e.in_stage("estimate"))?;
    let mut est = fit_json(&fit);
    est["membership_fit"] = serde_json::to_value(&logistic)?;
    fs::write(out("estimate.json"), json_bytes(&stamp.attach(est)))?;

    let t = fit.treatment();
    let mut summary = String::new();
    summary.push_str(&format!("{}\n", stamp.lines()));
    summary.push_str(&format!(
        "meta-regression: {} trials, tau2 = {:.4}, Q = {:.3} on {} df\n",
        trials.len(),
        meta.tau2,
        meta.q_stat,
        meta.df
    ));
    summary.push_str(&format!(
        "pooled subjects: {} target + {} reconstructed ({})\n",
        target.len(),
        recon.len(),
        cfg.borrow
    ));
    summary.push_str(&format!(
        "membership model: {} ({} iterations, ridge {:e})\n",
        logistic.features, logistic.iterations, logistic.ridge_lambda
    ));
    summary.push_str(&format!(
        "treatment effect ({} model, {} meat): {:.4} (SE {:.4}), 95% CI [{:.4}, {:.4}], t = {:.3}, p = {:.4e}, df = {}\n",
        fit.model, fit.meat, t.estimate, t.se, t.ci_low, t.ci_high, t.t_value, t.p_value, fit.df
    ));
    fs::write(out("summary.txt"), &summary)?;
    Ok(summary)
}
