//! End-to-end orchestration: data, imputation, one BART fit per imputation
//! and outcome, effects, support and pooling.
//!
//! Every random stream is derived from the master seed and a fixed stream
//! path, and parallel loops collect in index order, so results do not
//! depend on the number of worker threads.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bart::{fit_bart, posterior_sd, predict_posterior, BartFit};
use crate::causal::{
    self, ate_from, dose_design, estimate_cate, indicator_name, subgroups, AdrfDraws, BinaryCounterfactuals,
    BinaryDesign, DoseCounterfactuals, EffectDraws, TreatmentMode, PROPENSITY_FEATURE,
};
use crate::config::{DataSource, RunConfig};
use crate::dataset::{load_table, Dataset};
use crate::design::Design;
use crate::error::{Error, Result};
use crate::mice::{impute_mice, read_stack, write_stack, ImputationStack};
use crate::report::{build_report, emit_report, Report};
use crate::stats::derive_seed;
use crate::support::{support_from_counterfactuals, support_from_doses, SupportReport, SupportRule};
use crate::synth::{apply_missingness, generate, Simulated};

const STREAM_DATA: u64 = 1;
const STREAM_MICE: u64 = 2;
const STREAM_PROPENSITY: u64 = 3;
const STREAM_BART: u64 = 4;

pub const DATA_FILE: &str = "data.csv";
pub const TRUTH_FILE: &str = "truth.json";
pub const IMPUTATIONS_DIR: &str = "imputations";
pub const FITS_DIR: &str = "fits";
pub const TIMINGS_FILE: &str = "timings.json";

/// Loads or simulates the analysis data. Simulated runs also return the
/// generating process for oracle comparisons.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Option<Simulated>)> {
    let master = cfg.master_seed()?;
    match &cfg.data {
        DataSource::File { path, schema } => Ok((load_table(path, schema)?, None)),
        DataSource::Simulate { spec, missingness } => {
            let mut spec = spec.clone();
            spec.seed = derive_seed(master, &[STREAM_DATA]);
            let sim = generate(&spec)?;
            let mut d = sim.data.clone();
            if let Some(ms) = missingness.as_ref().filter(|ms| ms.rate > 0.0) {
                let seed = derive_seed(master, &[STREAM_DATA, 1]);
                d = apply_missingness(&d, &ms.column, &ms.mechanism, ms.rate, seed)?;
            }
            Ok((d, Some(sim)))
        }
    }
}

pub fn impute(cfg: &RunConfig, d: &Dataset) -> Result<ImputationStack> {
    impute_mice(d, &cfg.mice_params(), derive_seed(cfg.master_seed()?, &[STREAM_MICE]))
}

/// Everything needed to rebuild a fit's design from its imputed dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub outcome: String,
    /// 1-based imputation index.
    pub imputation: usize,
    pub mode: TreatmentMode,
    pub treatment: String,
    pub covariates: Vec<String>,
    pub cutoff: Option<f64>,
    pub z: Option<Vec<f64>>,
    pub propensity: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub meta: FitMeta,
    pub fit: BartFit,
}

fn binary_parts(cfg: &RunConfig, d: &Dataset, k: usize, master: u64) -> Result<BinaryDesign> {
    let p = cfg
        .propensity
        .clone()
        .with_seed(derive_seed(master, &[STREAM_PROPENSITY, k as u64]));
    causal::binary_design(d, &d.roles.covariates, &cfg.treatment, &p)
}

fn rebuild_binary(d: &Dataset, meta: &FitMeta) -> Result<BinaryDesign> {
    let (z, propensity) = match (&meta.z, &meta.propensity) {
        (Some(z), Some(p)) => (z.clone(), p.clone()),
        _ => return Err(Error::data("binary fit is missing its indicator or propensity")),
    };
    let design = Design::from_dataset(d, &meta.covariates)?
        .with_column(&indicator_name(&meta.treatment), &z)?
        .with_column(PROPENSITY_FEATURE, &propensity)?;
    let z_col = design.n_features() - 2;
    Ok(BinaryDesign {
        design,
        z,
        cutoff: meta.cutoff.unwrap_or(0.0),
        propensity,
        z_col,
    })
}

/// One BART fit per (imputation, outcome), in that order.
pub fn fit_models(cfg: &RunConfig, stack: &ImputationStack) -> Result<Vec<FittedModel>> {
    let master = cfg.master_seed()?;
    let outcomes = stack.datasets[0].roles.outcomes.clone();
    let jobs: Vec<(usize, usize)> = (0..stack.m())
        .flat_map(|k| (0..outcomes.len()).map(move |o| (k, o)))
        .collect();
    jobs.into_par_iter()
        .map(|(k, o)| {
            let d = &stack.datasets[k];
            let outcome = &outcomes[o];
            let y = &d.require(outcome)?.values;
            let params = cfg
                .bart
                .clone()
                .with_seed(derive_seed(master, &[STREAM_BART, k as u64, o as u64]));
            let mut meta = FitMeta {
                outcome: outcome.clone(),
                imputation: k + 1,
                mode: cfg.treatment.mode,
                treatment: cfg.treatment.column.clone(),
                covariates: d.roles.covariates.clone(),
                cutoff: None,
                z: None,
                propensity: None,
            };
            let fit = match cfg.treatment.mode {
                TreatmentMode::BinaryMedian => {
                    let bd = binary_parts(cfg, d, k, master)?;
                    meta.cutoff = Some(bd.cutoff);
                    let fit = fit_bart(&bd.design, y, &params)?;
                    meta.z = Some(bd.z);
                    meta.propensity = Some(bd.propensity);
                    fit
                }
                TreatmentMode::Continuous => {
                    let (x, _) = dose_design(d, &meta.covariates, &meta.treatment)?;
                    fit_bart(&x, y, &params)?
                }
            };
            Ok(FittedModel { meta, fit })
        })
        .collect()
}

fn fit_stem(meta: &FitMeta) -> String {
    format!("{}_{:03}", meta.outcome, meta.imputation)
}

/// Writes `<outcome>_<k>.bin` plus a JSON sidecar per fit.
pub fn write_fits(fits: &[FittedModel], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Vec::new();
    for m in fits {
        let stem = fit_stem(&m.meta);
        let path = dir.join(format!("{stem}.bin"));
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        m.fit.write_to(BufWriter::new(f))?;
        let path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(&m.meta).expect("fit metadata serialises");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        index.push(stem);
    }
    let path = dir.join("index.json");
    fs::write(&path, serde_json::to_string_pretty(&index).expect("index serialises"))
        .map_err(|e| Error::io(&path, e))
}

pub fn read_fits(dir: &Path) -> Result<Vec<FittedModel>> {
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: Vec<String> =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    index
        .iter()
        .map(|stem| {
            let path = dir.join(format!("{stem}.json"));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let meta = serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
            let path = dir.join(format!("{stem}.bin"));
            let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let fit = BartFit::read_from(std::io::BufReader::new(f))?;
            Ok(FittedModel { meta, fit })
        })
        .collect()
}

/// Effects and support from one fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub outcome: String,
    pub imputation: usize,
    pub cutoff: Option<f64>,
    pub effects: Vec<EffectDraws>,
    pub curve: Option<AdrfDraws>,
    pub support: Vec<SupportReport>,
}

pub fn supported_label(rule: SupportRule) -> String {
    format!("ate_supported:{}", rule.label())
}

fn analyze_binary(cfg: &RunConfig, d: &Dataset, m: &FittedModel) -> Result<Analysis> {
    let k = m.meta.imputation;
    let bd = rebuild_binary(d, &m.meta)?;
    let cf = BinaryCounterfactuals::compute(&m.fit, &bd)?;
    let mut effects = vec![ate_from(&cf, None)?];
    let support = cfg
        .support
        .iter()
        .map(|&r| support_from_counterfactuals(&cf, &bd.z, r))
        .collect::<Result<Vec<_>>>()?;
    if let Some(rule) = cfg.effects.supported_ate {
        let report = match support.iter().find(|s| s.rule == rule) {
            Some(s) => s.clone(),
            None => support_from_counterfactuals(&cf, &bd.z, rule)?,
        };
        let mut e = ate_from(&cf, Some(&report.kept()))?;
        e.estimand = supported_label(rule);
        effects.push(e);
    }
    if !cfg.effects.cate.is_empty() {
        let ue = cf.unit_effects();
        for c in &cfg.effects.cate {
            let cate = estimate_cate(&ue, &subgroups(d, &c.moderator, c.binning)?)?;
            effects.extend(cate.subgroups);
            effects.extend(cate.differences);
        }
    }
    Ok(Analysis {
        outcome: m.meta.outcome.clone(),
        imputation: k,
        cutoff: Some(bd.cutoff),
        effects: effects.into_iter().map(|e| e.with_imputation(k)).collect(),
        curve: None,
        support,
    })
}

fn analyze_dose(cfg: &RunConfig, d: &Dataset, m: &FittedModel) -> Result<Analysis> {
    let k = m.meta.imputation;
    let (x, col) = dose_design(d, &m.meta.covariates, &m.meta.treatment)?;
    let grid = &cfg.treatment.grid;
    let mut doses = grid.clone();
    for &(a0, a1) in &cfg.effects.leaps {
        doses.extend([a0, a1]);
    }
    let cf = DoseCounterfactuals::compute(&m.fit, &x, col, &doses)?;
    let curve = cf.adrf(grid)?;
    let effects = cfg
        .effects
        .leaps
        .iter()
        .map(|&(a0, a1)| cf.leap(a0, a1).map(|e| e.with_imputation(k)))
        .collect::<Result<Vec<_>>>()?;
    let factual = posterior_sd(&predict_posterior(&m.fit, &x)?);
    let support = cfg
        .support
        .iter()
        .map(|&r| support_from_doses(&factual, &cf, grid, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(Analysis {
        outcome: m.meta.outcome.clone(),
        imputation: k,
        cutoff: None,
        effects,
        curve: Some(curve),
        support,
    })
}

pub fn analyze(cfg: &RunConfig, stack: &ImputationStack, fits: &[FittedModel]) -> Result<Vec<Analysis>> {
    fits.par_iter()
        .map(|m| {
            let d = stack
                .datasets
                .get(m.meta.imputation.wrapping_sub(1))
                .ok_or_else(|| Error::data(format!("fit refers to missing imputation {}", m.meta.imputation)))?;
            match m.meta.mode {
                TreatmentMode::BinaryMedian => analyze_binary(cfg, d, m),
                TreatmentMode::Continuous => analyze_dose(cfg, d, m),
            }
        })
        .collect()
}

/// Everything a full run produces in memory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub data: Dataset,
    pub truth: Option<Simulated>,
    pub stack: ImputationStack,
    pub fits: Vec<FittedModel>,
    pub analyses: Vec<Analysis>,
    pub report: Report,
    /// Wall-clock seconds per stage, kept out of the report.
    pub timings: BTreeMap<String, f64>,
}

fn timed<T>(timings: &mut BTreeMap<String, f64>, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage))?;
    timings.insert(stage.to_string(), t.elapsed().as_secs_f64());
    Ok(out)
}

/// Runs every stage in memory.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut timings = BTreeMap::new();
    let (data, truth) = timed(&mut timings, "data", || load_data(cfg))?;
    let stack = timed(&mut timings, "impute", || impute(cfg, &data))?;
    let fits = timed(&mut timings, "fit", || fit_models(cfg, &stack))?;
    let analyses = timed(&mut timings, "effects", || analyze(cfg, &stack, &fits))?;
    let report = timed(&mut timings, "pool", || build_report(cfg, &data, &stack, &analyses))?;
    Ok(RunOutput {
        data,
        truth,
        stack,
        fits,
        analyses,
        report,
        timings,
    })
}

/// Writes the input data, and the generating process when simulated.
pub fn write_data(dir: &Path, d: &Dataset, truth: Option<&Simulated>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(DATA_FILE);
    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    d.write_csv(BufWriter::new(f))?;
    if let Some(sim) = truth {
        let path = dir.join(TRUTH_FILE);
        let json = serde_json::to_string_pretty(&sim.manifest()).expect("manifest serialises");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn write_outputs(out: &RunOutput, dir: &Path, save_fits: bool) -> Result<()> {
    write_data(dir, &out.data, out.truth.as_ref())?;
    write_stack(&out.stack, &dir.join(IMPUTATIONS_DIR))?;
    if save_fits {
        write_fits(&out.fits, &dir.join(FITS_DIR))?;
    }
    emit_report(&out.report, &out.analyses, dir)?;
    let path = dir.join(TIMINGS_FILE);
    let json = serde_json::to_string_pretty(&out.timings).expect("timings serialise");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

/// Runs the pipeline and publishes all outputs at `dir` in one rename.
/// On failure nothing is left behind and an existing `dir` is untouched.
pub fn run_to_dir(cfg: &RunConfig, dir: &Path, save_fits: bool) -> Result<RunOutput> {
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".staging-")
        .tempdir_in(&parent)
        .map_err(|e| Error::io(&parent, e))?;
    let out = run_pipeline(cfg)?;
    write_outputs(&out, staging.path(), save_fits).map_err(|e| e.in_stage("report"))?;
    publish(staging, dir)?;
    Ok(out)
}

fn publish(staging: tempfile::TempDir, dir: &Path) -> Result<()> {
    let old = if dir.exists() {
        let parent = staging.path().parent().expect("staging has a parent");
        let old = tempfile::Builder::new()
            .prefix(".previous-")
            .tempdir_in(parent)
            .map_err(|e| Error::io(parent, e))?;
        let target = old.path().join("out");
        fs::rename(dir, &target).map_err(|e| Error::io(dir, e))?;
        Some(old)
    } else {
        None
    };
    let path = staging.keep();
    if let Err(e) = fs::rename(&path, dir) {
        if let Some(old) = &old {
            let _ = fs::rename(old.path().join("out"), dir);
        }
        let _ = fs::remove_dir_all(&path);
        return Err(Error::io(dir, e));
    }
    drop(old);
    Ok(())
}

/// Reads the imputation stack written by an earlier stage.
pub fn read_imputations(dir: &Path) -> Result<ImputationStack> {
    read_stack(&dir.join(IMPUTATIONS_DIR))
}
