//! Common-support diagnostics from posterior prediction uncertainty.
//!
//! A unit is supported when the posterior sd of its counterfactual
//! prediction does not exceed a threshold derived from factual-prediction
//! sds. In binary mode the threshold for a unit comes from the group whose
//! treatment state is being predicted for it; in dose mode from the whole
//! sample.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bart::{posterior_sd, predict_posterior, BartFit};
use crate::causal::{BinaryCounterfactuals, BinaryDesign, DoseCounterfactuals};
use crate::design::Design;
use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SupportRule {
    /// Largest factual sd plus one sd of the factual sds.
    #[default]
    Relaxed,
    /// 90th percentile of the factual sds.
    Conservative,
}

impl SupportRule {
    pub fn label(self) -> &'static str {
        match self {
            SupportRule::Relaxed => "relaxed",
            SupportRule::Conservative => "conservative",
        }
    }

    pub fn threshold(self, sds: &[f64]) -> Result<f64> {
        if sds.len() < 2 {
            return Err(Error::data(format!(
                "support threshold needs at least 2 reference units, got {}",
                sds.len()
            )));
        }
        Ok(match self {
            SupportRule::Relaxed => {
                sds.iter().copied().fold(f64::NEG_INFINITY, f64::max) + stats::sd(sds)
            }
            SupportRule::Conservative => stats::quantile(sds, 0.9),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSupport {
    pub factual_sd: f64,
    /// One entry for binary mode, one per dose otherwise.
    pub counterfactual_sd: Vec<f64>,
    pub threshold: f64,
    pub kept: Vec<bool>,
}

impl UnitSupport {
    /// Supported in every counterfactual state.
    pub fn kept_all(&self) -> bool {
        self.kept.iter().all(|&k| k)
    }
}

/// Thresholds fixed ahead of classification: one per treatment group in
/// binary mode, a single value in dose mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Thresholds {
    ByGroup { control: f64, treated: f64 },
    Pooled(f64),
}

impl Thresholds {
    /// Threshold applied to a unit whose counterfactual state is `state`.
    fn for_state(&self, state: Option<bool>) -> f64 {
        match (*self, state) {
            (Thresholds::ByGroup { treated, .. }, Some(true)) => treated,
            (Thresholds::ByGroup { control, .. }, _) => control,
            (Thresholds::Pooled(t), _) => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportReport {
    pub rule: SupportRule,
    pub thresholds: Thresholds,
    pub units: Vec<UnitSupport>,
    /// Grid doses in dose mode, empty in binary mode.
    pub doses: Vec<f64>,
    /// Kept fraction in each counterfactual state: per dose in dose mode,
    /// a single entry in binary mode.
    pub per_dose: Vec<f64>,
    /// Fraction of units supported in every state.
    pub kept_fraction: f64,
}

impl SupportReport {
    fn assemble(rule: SupportRule, thresholds: Thresholds, units: Vec<UnitSupport>, doses: Vec<f64>) -> Self {
        let n = units.len().max(1) as f64;
        let states = units.first().map_or(0, |u| u.kept.len());
        let per_dose = (0..states)
            .map(|k| units.iter().filter(|u| u.kept[k]).count() as f64 / n)
            .collect();
        let kept_fraction = units.iter().filter(|u| u.kept_all()).count() as f64 / n;
        Self {
            rule,
            thresholds,
            units,
            doses,
            per_dose,
            kept_fraction,
        }
    }

    pub fn kept(&self) -> Vec<bool> {
        self.units.iter().map(UnitSupport::kept_all).collect()
    }
}

fn split_by_group(values: &[f64], z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut control = Vec::new();
    let mut treated = Vec::new();
    for (&v, &zi) in values.iter().zip(z) {
        if zi > 0.5 {
            treated.push(v)
        } else {
            control.push(v)
        }
    }
    (control, treated)
}

/// Factual and counterfactual sds per unit from both-state predictions.
pub fn binary_sds(cf: &BinaryCounterfactuals, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    z.iter()
        .enumerate()
        .map(|(i, &zi)| {
            let (t, c) = (cf.treated.sd[i], cf.control.sd[i]);
            if zi > 0.5 {
                (t, c)
            } else {
                (c, t)
            }
        })
        .unzip()
}

pub fn binary_thresholds(factual: &[f64], z: &[f64], rule: SupportRule) -> Result<Thresholds> {
    let (control, treated) = split_by_group(factual, z);
    let group = |sds: &[f64], name: &str| {
        rule.threshold(sds)
            .map_err(|_| Error::data(format!("{name} group has {} units; support needs at least 2", sds.len())))
    };
    Ok(Thresholds::ByGroup {
        control: group(&control, "control")?,
        treated: group(&treated, "treated")?,
    })
}

/// Classifies units against frozen thresholds.
pub fn classify_binary(
    factual: &[f64],
    counterfactual: &[f64],
    z: &[f64],
    rule: SupportRule,
    thresholds: Thresholds,
) -> SupportReport {
    let units = (0..z.len())
        .map(|i| {
            let threshold = thresholds.for_state(Some(z[i] <= 0.5));
            UnitSupport {
                factual_sd: factual[i],
                counterfactual_sd: vec![counterfactual[i]],
                threshold,
                kept: vec![counterfactual[i] <= threshold],
            }
        })
        .collect();
    SupportReport::assemble(rule, thresholds, units, Vec::new())
}

pub fn support_from_counterfactuals(
    cf: &BinaryCounterfactuals,
    z: &[f64],
    rule: SupportRule,
) -> Result<SupportReport> {
    let (factual, counterfactual) = binary_sds(cf, z);
    let thresholds = binary_thresholds(&factual, z, rule)?;
    Ok(classify_binary(&factual, &counterfactual, z, rule, thresholds))
}

pub fn support_binary(fit: &BartFit, bd: &BinaryDesign, rule: SupportRule) -> Result<SupportReport> {
    support_from_counterfactuals(&BinaryCounterfactuals::compute(fit, bd)?, &bd.z, rule)
}

/// Classifies units at each grid dose against a frozen threshold.
pub fn classify_continuous(
    factual: &[f64],
    at_dose: &[Vec<f64>],
    doses: &[f64],
    rule: SupportRule,
    threshold: f64,
) -> SupportReport {
    let units = (0..factual.len())
        .map(|i| {
            let sds: Vec<f64> = at_dose.iter().map(|s| s[i]).collect();
            UnitSupport {
                factual_sd: factual[i],
                kept: sds.iter().map(|&s| s <= threshold).collect(),
                counterfactual_sd: sds,
                threshold,
            }
        })
        .collect();
    SupportReport::assemble(rule, Thresholds::Pooled(threshold), units, doses.to_vec())
}

pub fn support_from_doses(
    factual: &[f64],
    cf: &DoseCounterfactuals,
    grid: &[f64],
    rule: SupportRule,
) -> Result<SupportReport> {
    let at_dose = grid
        .iter()
        .map(|&a| cf.state(a).map(|s| s.sd.clone()))
        .collect::<Result<Vec<_>>>()?;
    let threshold = rule.threshold(factual)?;
    Ok(classify_continuous(factual, &at_dose, grid, rule, threshold))
}

pub fn support_continuous(
    fit: &BartFit,
    x: &Design,
    dose_col: usize,
    grid: &[f64],
    rule: SupportRule,
) -> Result<SupportReport> {
    let factual = posterior_sd(&predict_posterior(fit, x)?);
    let cf = DoseCounterfactuals::compute(fit, x, dose_col, grid)?;
    support_from_doses(&factual, &cf, grid, rule)
}

/// Writes `imputation,dose,rule,fraction` rows. Binary reports use the
/// dose label `all`.
pub fn write_support_csv<W: Write>(w: W, rows: &[(usize, &SupportReport)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::data(format!("writing support table: {e}"));
    out.write_record(["imputation", "dose", "rule", "fraction"]).map_err(io)?;
    for (imp, r) in rows {
        for (k, f) in r.per_dose.iter().enumerate() {
            let dose = r.doses.get(k).map_or_else(|| "all".to_string(), |d| d.to_string());
            out.write_record([imp.to_string(), dose, r.rule.label().to_string(), f.to_string()])
                .map_err(io)?;
        }
    }
    out.flush().map_err(|e| Error::data(format!("writing support table: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests;
