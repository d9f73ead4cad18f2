//! Pooled summary report and its CSV sidecars.
//!
//! `report.json` depends only on the configuration and the seed; run
//! timings are written to a separate file.

use std::collections::BTreeSet;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bart::BartParams;
use crate::causal::{write_effect_draws, TreatmentMode, ATE};
use crate::config::RunConfig;
use crate::dataset::{missingness_profile, Dataset, MissingnessProfile};
use crate::error::{Error, Result};
use crate::mice::{chain_trace, imputation_diagnostics, ImputationStack};
use crate::pipeline::Analysis;
use crate::pooling::{pool_curve, pool_rubin, PooledEffect};
use crate::support::{write_support_csv, SupportRule};

/// Bumped on any change to the report layout.
pub const SCHEMA_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";
pub const NO_CURVES_NOTE: &str = "no dose-response curves were estimated; curve sidecar omitted";

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// One pooled estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub outcome: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Absent when undefined (no within-imputation variance).
    pub fmi: Option<f64>,
    pub riv: Option<f64>,
}

impl EffectRow {
    pub fn from_pooled(outcome: &str, p: &PooledEffect) -> Self {
        Self {
            outcome: outcome.to_string(),
            estimate: p.qbar,
            se: p.se,
            ci_low: p.ci.0,
            ci_high: p.ci.1,
            fmi: finite(p.fmi),
            riv: finite(p.riv),
        }
    }
}

/// A pooled estimand other than the overall ATE: leaps, subgroup effects
/// and their differences, support-restricted ATEs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastRow {
    pub contrast: String,
    #[serde(flatten)]
    pub row: EffectRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub dose: f64,
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub fmi: Option<f64>,
    pub riv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub outcome: String,
    pub points: Vec<CurvePoint>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSummary {
    pub outcome: String,
    pub imputation: usize,
    pub rule: SupportRule,
    pub kept_fraction: f64,
    /// Grid doses; empty in binary mode.
    pub doses: Vec<f64>,
    pub per_dose: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableDiagnostics {
    pub variable: String,
    pub smd: f64,
    pub variance_ratio: f64,
    pub flagged: bool,
    pub converged: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub missingness: MissingnessProfile,
    pub imputation: Vec<VariableDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub version: String,
    pub seed: u64,
    pub m: usize,
    pub n: usize,
    pub level: f64,
    pub treatment: String,
    pub mode: TreatmentMode,
    /// Binary-mode cutoff per imputation.
    pub cutoffs: Vec<f64>,
    pub outcomes: Vec<String>,
    pub covariates: Vec<String>,
    pub bart: BartParams,
    pub df_method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub metadata: Metadata,
    pub effects: Vec<EffectRow>,
    pub contrasts: Vec<ContrastRow>,
    pub curves: Vec<CurveReport>,
    pub support: Vec<SupportSummary>,
    pub diagnostics: Diagnostics,
    /// Sidecar files written next to the report.
    pub files: Vec<String>,
    pub notes: Vec<String>,
}

fn by_outcome<'a>(analyses: &'a [Analysis], outcome: &str) -> Vec<&'a Analysis> {
    analyses.iter().filter(|a| a.outcome == outcome).collect()
}

fn outcomes_in_order(analyses: &[Analysis]) -> Vec<String> {
    let mut seen = Vec::new();
    for a in analyses {
        if !seen.contains(&a.outcome) {
            seen.push(a.outcome.clone());
        }
    }
    seen
}

fn sidecar(prefix: &str, outcome: &str) -> String {
    format!("{prefix}_{outcome}.csv")
}

/// Pools per-imputation results into the summary document.
pub fn build_report(
    cfg: &RunConfig,
    data: &Dataset,
    stack: &ImputationStack,
    analyses: &[Analysis],
) -> Result<Report> {
    let level = cfg.level;
    let mut effects = Vec::new();
    let mut contrasts = Vec::new();
    let mut curves = Vec::new();
    let mut files = Vec::new();
    let outcomes = outcomes_in_order(analyses);
    for outcome in &outcomes {
        let parts = by_outcome(analyses, outcome);
        let labels: Vec<&str> = parts[0].effects.iter().map(|e| e.estimand.as_str()).collect();
        for label in labels {
            let (mut means, mut vars) = (Vec::new(), Vec::new());
            for a in &parts {
                let e = a
                    .effects
                    .iter()
                    .find(|e| e.estimand == label)
                    .ok_or_else(|| Error::data(format!("imputation {} lacks `{label}`", a.imputation)))?;
                means.push(e.mean());
                vars.push(e.variance());
            }
            let row = EffectRow::from_pooled(outcome, &pool_rubin(&means, &vars, level)?);
            if label == ATE {
                effects.push(row);
            } else {
                contrasts.push(ContrastRow {
                    contrast: label.to_string(),
                    row,
                });
            }
        }
        files.push(sidecar("effect_draws", outcome));
        let with_curves: Vec<_> = parts.iter().filter_map(|a| a.curve.as_ref()).collect();
        if !with_curves.is_empty() {
            let grid = &with_curves[0].grid;
            let means: Vec<Vec<f64>> = with_curves.iter().map(|c| c.mean.clone()).collect();
            let vars: Vec<Vec<f64>> = with_curves.iter().map(|c| c.variance()).collect();
            let pooled = pool_curve(grid, &means, &vars, level)?;
            let warnings: BTreeSet<String> = with_curves.iter().flat_map(|c| c.warnings.clone()).collect();
            curves.push(CurveReport {
                outcome: outcome.clone(),
                points: grid
                    .iter()
                    .zip(&pooled.points)
                    .map(|(&dose, p)| CurvePoint {
                        dose,
                        estimate: p.qbar,
                        se: p.se,
                        ci_low: p.ci.0,
                        ci_high: p.ci.1,
                        fmi: finite(p.fmi),
                        riv: finite(p.riv),
                    })
                    .collect(),
                warnings: warnings.into_iter().collect(),
            });
            files.push(sidecar("curves", outcome));
        }
        files.push(sidecar("support", outcome));
    }
    let mut notes = Vec::new();
    if curves.is_empty() {
        notes.push(NO_CURVES_NOTE.to_string());
    }

    let support = analyses
        .iter()
        .flat_map(|a| {
            a.support.iter().map(move |s| SupportSummary {
                outcome: a.outcome.clone(),
                imputation: a.imputation,
                rule: s.rule,
                kept_fraction: s.kept_fraction,
                doses: s.doses.clone(),
                per_dose: s.per_dose.clone(),
            })
        })
        .collect();

    let imputation = stack.datasets[0]
        .columns
        .iter()
        .zip(&stack.source_mask)
        .filter(|(_, m)| m.iter().any(|&b| b))
        .map(|(c, _)| {
            let d = imputation_diagnostics(stack, &c.name)?;
            let t = chain_trace(stack, &c.name)?;
            Ok(VariableDiagnostics {
                variable: c.name.clone(),
                smd: d.pooled.smd,
                variance_ratio: d.pooled.variance_ratio,
                flagged: d.pooled.flagged,
                converged: t.converged,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let cutoffs = analyses
        .iter()
        .filter(|a| outcomes.first() == Some(&a.outcome))
        .filter_map(|a| a.cutoff)
        .collect();
    Ok(Report {
        schema_version: SCHEMA_VERSION,
        metadata: Metadata {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.master_seed()?,
            m: stack.m(),
            n: data.n(),
            level,
            treatment: cfg.treatment.column.clone(),
            mode: cfg.treatment.mode,
            cutoffs,
            outcomes,
            covariates: data.roles.covariates.clone(),
            bart: cfg.bart.clone(),
            df_method: "classical".to_string(),
        },
        effects,
        contrasts,
        curves,
        support,
        diagnostics: Diagnostics {
            missingness: missingness_profile(data),
            imputation,
        },
        files,
        notes,
    })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<fs::File>> {
    let path = dir.join(name);
    fs::File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(&path, e))
}

fn write_curves(w: impl std::io::Write, parts: &[&Analysis]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::data(format!("writing curves: {e}"));
    out.write_record(["imputation", "dose", "estimate", "variance"]).map_err(err)?;
    for a in parts {
        if let Some(c) = &a.curve {
            for ((dose, m), v) in c.grid.iter().zip(&c.mean).zip(c.variance()) {
                out.write_record([a.imputation.to_string(), dose.to_string(), m.to_string(), v.to_string()])
                    .map_err(err)?;
            }
        }
    }
    out.flush().map_err(|e| Error::data(format!("writing curves: {e}")))
}

/// Writes `report.json` and the sidecars it lists into `dir`.
pub fn emit_report(report: &Report, analyses: &[Analysis], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for outcome in &report.metadata.outcomes {
        let parts = by_outcome(analyses, outcome);
        let draws: Vec<_> = parts.iter().flat_map(|a| a.effects.iter().cloned()).collect();
        write_effect_draws(create(dir, &sidecar("effect_draws", outcome))?, &draws)?;
        let name = sidecar("curves", outcome);
        if report.files.contains(&name) {
            write_curves(create(dir, &name)?, &parts)?;
        }
        let rows: Vec<_> = parts.iter().flat_map(|a| a.support.iter().map(move |s| (a.imputation, s))).collect();
        write_support_csv(create(dir, &sidecar("support", outcome))?, &rows)?;
    }
    let path = dir.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::data(format!("report: {e}")))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_report(path: &Path) -> Result<Report> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}
