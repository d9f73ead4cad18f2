//! Synthetic data-generating processes with known causal ground truth.
//!
//! Covariates `x1..xp` are independent standard normals. A binary process
//! assigns `z` by a logistic model in `x1` and `x2`; a dose process draws an
//! integer dose in `[0, 80]` whose latent normal score is correlated with
//! the same covariates. Outcomes add a baseline in `x`, the treatment
//! contribution and normal noise.

use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{Column, ColumnKind, Dataset, Roles};
use crate::error::{Error, Result};
use crate::stats::{self, rng_for, Rng};

pub const DOSE_MAX: f64 = 80.0;
/// Dose at which the plateau shape stops rising.
pub const PLATEAU_KNEE: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoseShape {
    Flat,
    Linear,
    Plateau,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum EffectForm {
    Null,
    Constant { tau: f64 },
    /// Effect `tau` for units whose covariate `x{moderator}` is positive.
    Subgroup { tau: f64, moderator: usize },
    /// Continuous dose with response `g`, rising by `rise` over the range.
    Dose { shape: DoseShape, rise: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DoseDistribution {
    /// Marginally uniform on `[0, 80]`.
    #[default]
    Uniform,
    /// Most mass below 40 with a thin upper tail.
    ConcentratedLow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    Linear,
    /// Adds an `x1·x2` interaction and a step in `x2`.
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpSpec {
    pub n: usize,
    pub n_covariates: usize,
    pub confounding: f64,
    pub effect: EffectForm,
    pub dose: DoseDistribution,
    pub baseline: Baseline,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        Self {
            n: 1000,
            n_covariates: 5,
            confounding: 1.0,
            effect: EffectForm::Constant { tau: 3.0 },
            dose: DoseDistribution::Uniform,
            baseline: Baseline::Linear,
            noise_sd: 1.0,
            seed: 0,
        }
    }
}

const LINEAR_COEFS: [f64; 4] = [1.0, 0.5, -0.5, 0.25];

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 20 {
            return Err(Error::config(format!("dgp needs n >= 20, got {}", self.n)));
        }
        if self.n_covariates < 2 {
            return Err(Error::config("dgp needs at least 2 covariates"));
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::config("dgp noise_sd must be positive"));
        }
        if !self.confounding.is_finite() {
            return Err(Error::config("dgp confounding must be finite"));
        }
        if let EffectForm::Subgroup { moderator, .. } = self.effect {
            if moderator == 0 || moderator > self.n_covariates {
                return Err(Error::config(format!(
                    "subgroup moderator x{moderator} outside x1..x{}",
                    self.n_covariates
                )));
            }
        }
        Ok(())
    }

    pub fn is_dose(&self) -> bool {
        matches!(self.effect, EffectForm::Dose { .. })
    }

    pub fn baseline_at(&self, x: &[f64]) -> f64 {
        let mut b: f64 = LINEAR_COEFS.iter().zip(x).map(|(c, v)| c * v).sum();
        if self.baseline == Baseline::Nonlinear {
            b += 0.5 * x[0] * x[1] + 1.5 * (x[1] > 0.0) as u8 as f64;
        }
        b
    }

    /// Population mean of the baseline.
    pub fn baseline_mean(&self) -> f64 {
        match self.baseline {
            Baseline::Linear => 0.0,
            Baseline::Nonlinear => 0.75,
        }
    }

    /// Binary-treatment unit effect at covariates `x`.
    pub fn unit_effect(&self, x: &[f64]) -> f64 {
        match self.effect {
            EffectForm::Null | EffectForm::Dose { .. } => 0.0,
            EffectForm::Constant { tau } => tau,
            EffectForm::Subgroup { tau, moderator } => tau * (x[moderator - 1] > 0.0) as u8 as f64,
        }
    }

    /// Dose response `g(a)`; zero for binary forms.
    pub fn g(&self, a: f64) -> f64 {
        let EffectForm::Dose { shape, rise } = self.effect else {
            return 0.0;
        };
        match shape {
            DoseShape::Flat => 0.0,
            DoseShape::Linear => rise * a / DOSE_MAX,
            DoseShape::Plateau => {
                if a >= PLATEAU_KNEE {
                    rise
                } else {
                    let u = 1.0 - a / PLATEAU_KNEE;
                    rise * (1.0 - u * u)
                }
            }
        }
    }

    fn confounder_score(x: &[f64]) -> f64 {
        (x[0] + 0.5 * x[1]) / 1.25f64.sqrt()
    }

    fn dose_for(&self, x: &[f64], xi: f64) -> f64 {
        let rho = self.confounding / (1.0 + self.confounding * self.confounding).sqrt();
        let latent = rho * Self::confounder_score(x) + (1.0 - rho * rho).sqrt() * xi;
        let u = Normal::new(0.0, 1.0).expect("standard normal").cdf(latent);
        let u = match self.dose {
            DoseDistribution::Uniform => u,
            DoseDistribution::ConcentratedLow => u.powi(3),
        };
        (DOSE_MAX * u).round()
    }
}

/// A generated dataset with the per-unit quantities behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub data: Dataset,
    pub spec: DgpSpec,
    /// Baseline `b(x_i)` per unit.
    pub baseline: Vec<f64>,
    /// Binary-treatment effect per unit (zero for dose processes).
    pub unit_effect: Vec<f64>,
}

impl Simulated {
    /// Sample average treatment effect of the generated units.
    pub fn sample_ate(&self) -> f64 {
        stats::mean(&self.unit_effect)
    }

    /// Sample-conditional ADRF: mean baseline of these units plus `g(a)`.
    pub fn sample_adrf(&self, grid: &[f64]) -> Vec<f64> {
        let b = stats::mean(&self.baseline);
        grid.iter().map(|&a| b + self.spec.g(a)).collect()
    }

    pub fn manifest(&self) -> serde_json::Value {
        let grid: Vec<f64> = (0..=8).map(|k| 10.0 * k as f64).collect();
        let mut m = serde_json::json!({
            "spec": self.spec,
            "n": self.data.n(),
        });
        if self.spec.is_dose() {
            m["oracle_adrf"] = serde_json::json!({
                "grid": grid,
                "population": oracle_adrf(&self.spec, &grid),
                "sample": self.sample_adrf(&grid),
            });
        } else {
            m["oracle_ate"] = serde_json::json!({
                "population": population_ate(&self.spec),
                "sample": self.sample_ate(),
            });
        }
        m
    }
}

fn covariate_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

fn draw_covariates(spec: &DgpSpec, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..spec.n)
        .map(|_| {
            (0..spec.n_covariates)
                .map(|_| StandardNormal.sample(&mut *rng))
                .collect()
        })
        .collect()
}

fn assemble(
    spec: &DgpSpec,
    x: &[Vec<f64>],
    treatment: Column,
    y: Vec<f64>,
) -> Result<Dataset> {
    let names = covariate_names(spec.n_covariates);
    let mut columns: Vec<Column> = names
        .iter()
        .enumerate()
        .map(|(j, name)| Column::continuous(name, x.iter().map(|r| r[j]).collect()))
        .collect();
    let treatment_name = treatment.name.clone();
    columns.push(treatment);
    columns.push(Column::continuous("y", y));
    Dataset::new(
        columns,
        Roles {
            outcomes: vec!["y".into()],
            treatment: treatment_name,
            covariates: names,
            id: None,
        },
    )
}

pub fn gen_binary_dgp(spec: &DgpSpec) -> Result<Simulated> {
    spec.validate()?;
    if spec.is_dose() {
        return Err(Error::config("binary process needs a null, constant or subgroup effect"));
    }
    let mut rng = rng_for(spec.seed, &[0x5e1]);
    let x = draw_covariates(spec, &mut rng);
    let mut z = Vec::with_capacity(spec.n);
    let mut y = Vec::with_capacity(spec.n);
    let mut baseline = Vec::with_capacity(spec.n);
    let mut unit_effect = Vec::with_capacity(spec.n);
    for row in &x {
        let p = stats::logistic(spec.confounding * DgpSpec::confounder_score(row));
        let zi = (rng.gen::<f64>() < p) as u8 as f64;
        let b = spec.baseline_at(row);
        let tau = spec.unit_effect(row);
        let eps: f64 = StandardNormal.sample(&mut rng);
        z.push(zi);
        y.push(b + tau * zi + spec.noise_sd * eps);
        baseline.push(b);
        unit_effect.push(tau);
    }
    let data = assemble(spec, &x, Column::numeric("z", ColumnKind::Binary, z), y)?;
    Ok(Simulated {
        data,
        spec: spec.clone(),
        baseline,
        unit_effect,
    })
}

pub fn gen_dose_dgp(spec: &DgpSpec) -> Result<Simulated> {
    spec.validate()?;
    if !spec.is_dose() {
        return Err(Error::config("dose process needs a dose effect form"));
    }
    let mut rng = rng_for(spec.seed, &[0xd05e]);
    let x = draw_covariates(spec, &mut rng);
    let mut dose = Vec::with_capacity(spec.n);
    let mut y = Vec::with_capacity(spec.n);
    let mut baseline = Vec::with_capacity(spec.n);
    for row in &x {
        let xi: f64 = StandardNormal.sample(&mut rng);
        let a = spec.dose_for(row, xi);
        let b = spec.baseline_at(row);
        let eps: f64 = StandardNormal.sample(&mut rng);
        dose.push(a);
        y.push(b + spec.g(a) + spec.noise_sd * eps);
        baseline.push(b);
    }
    let data = assemble(spec, &x, Column::numeric("dose", ColumnKind::Count, dose), y)?;
    Ok(Simulated {
        data,
        spec: spec.clone(),
        baseline,
        unit_effect: vec![0.0; spec.n],
    })
}

/// Generate from whichever process matches the spec's effect form.
pub fn generate(spec: &DgpSpec) -> Result<Simulated> {
    if spec.is_dose() {
        gen_dose_dgp(spec)
    } else {
        gen_binary_dgp(spec)
    }
}

/// Population ATE of a binary process.
pub fn population_ate(spec: &DgpSpec) -> f64 {
    match spec.effect {
        EffectForm::Null | EffectForm::Dose { .. } => 0.0,
        EffectForm::Constant { tau } => tau,
        // moderators are standard normal, so Pr(x > 0) = 1/2
        EffectForm::Subgroup { tau, .. } => 0.5 * tau,
    }
}

/// Population ADRF `E[b(X)] + g(a)` on a grid.
pub fn oracle_adrf(spec: &DgpSpec, grid: &[f64]) -> Vec<f64> {
    let b = spec.baseline_mean();
    grid.iter().map(|&a| b + spec.g(a)).collect()
}

/// Monte Carlo estimate of the ADRF from `draws` fresh covariate vectors,
/// with its Monte Carlo standard error (identical at every grid point).
pub fn monte_carlo_adrf(spec: &DgpSpec, grid: &[f64], draws: usize, seed: u64) -> (Vec<f64>, f64) {
    let mut rng = rng_for(seed, &[0x3c]);
    let mut x = vec![0.0; spec.n_covariates];
    let mut b = Vec::with_capacity(draws);
    for _ in 0..draws {
        for v in x.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        b.push(spec.baseline_at(&x));
    }
    let mb = stats::mean(&b);
    let se = stats::sd(&b) / (draws as f64).sqrt();
    (grid.iter().map(|&a| mb + spec.g(a)).collect(), se)
}

/// A labelled ground-truth quantity.
#[derive(Debug, Clone, PartialEq)]
pub enum Estimand {
    Ate,
    Adrf(Vec<f64>),
    Leap { a0: f64, a1: f64 },
    /// Effect among `moderator > 0` minus effect among `moderator <= 0`.
    SubgroupDifference,
}

impl FromStr for Estimand {
    type Err = Error;

    /// Labels: `ate`, `adrf` (default grid), `adrf:0,20,40`, `leap:0:37`,
    /// `subgroup_difference`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("unknown estimand `{s}`"));
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
        match s.split_once(':') {
            None => match s {
                "ate" => Ok(Estimand::Ate),
                "adrf" => Ok(Estimand::Adrf((0..=8).map(|k| 10.0 * k as f64).collect())),
                "subgroup_difference" => Ok(Estimand::SubgroupDifference),
                _ => Err(bad()),
            },
            Some(("adrf", rest)) => Ok(Estimand::Adrf(
                rest.split(',').map(num).collect::<Result<Vec<_>>>()?,
            )),
            Some(("leap", rest)) => {
                let (a, b) = rest.split_once(':').ok_or_else(bad)?;
                Ok(Estimand::Leap { a0: num(a)?, a1: num(b)? })
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub values: Vec<f64>,
    /// Zero for closed-form values.
    pub mc_se: f64,
}

pub fn oracle_truth(spec: &DgpSpec, estimand: &Estimand) -> Result<Truth> {
    spec.validate()?;
    let exact = |values: Vec<f64>| Ok(Truth { values, mc_se: 0.0 });
    match estimand {
        Estimand::Ate => {
            if spec.is_dose() {
                return Err(Error::config("ate is undefined for a dose process"));
            }
            exact(vec![population_ate(spec)])
        }
        Estimand::SubgroupDifference => match spec.effect {
            EffectForm::Subgroup { tau, .. } => exact(vec![tau]),
            EffectForm::Null | EffectForm::Constant { .. } => exact(vec![0.0]),
            EffectForm::Dose { .. } => Err(Error::config("subgroup difference needs a binary process")),
        },
        Estimand::Adrf(grid) => {
            if !spec.is_dose() {
                return Err(Error::config("adrf needs a dose process"));
            }
            exact(oracle_adrf(spec, grid))
        }
        Estimand::Leap { a0, a1 } => {
            if !spec.is_dose() {
                return Err(Error::config("leap needs a dose process"));
            }
            exact(vec![spec.g(*a1) - spec.g(*a0)])
        }
    }
}

/// How cells of the target column are chosen for deletion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mechanism", rename_all = "snake_case")]
pub enum Mechanism {
    Mcar,
    /// Deletion weight `logistic(strength · s)` where `s` is the standardised
    /// sum of the (fully observed) predictors.
    Mar { predictors: Vec<String>, strength: f64 },
    /// Uniform deletion among rows whose predictor exceeds `threshold`.
    MarThreshold { predictor: String, threshold: f64 },
    /// Deletion weight `logistic(strength · s)` with `s` the standardised
    /// target value itself. An infinite strength deletes the largest values.
    Nmar { strength: f64 },
}

fn standardized(v: &[f64]) -> Vec<f64> {
    let m = stats::mean(v);
    let s = stats::sd(v);
    let s = if s > 0.0 { s } else { 1.0 };
    v.iter().map(|x| (x - m) / s).collect()
}

/// Top-`k` of weighted sampling without replacement (Efraimidis–Spirakis
/// keys `ln(u) / w`). Ties in key break toward the lower index.
fn weighted_sample(candidates: &[usize], weights: &[f64], k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = candidates
        .iter()
        .zip(weights)
        .map(|(&i, &w)| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            (u.ln() / w.max(1e-300), i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Mask exactly `round(rate · n)` currently observed cells of `target`.
/// Only the mask changes; values are left in place.
pub fn apply_missingness(
    d: &Dataset,
    target: &str,
    mechanism: &Mechanism,
    rate: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::config(format!("missingness rate {rate} outside (0, 1)")));
    }
    let col = d.require(target)?;
    let observed = col.observed_rows();
    let k = (rate * d.n() as f64).round() as usize;
    if k >= observed.len() {
        return Err(Error::data(format!(
            "deleting {k} cells would leave `{target}` with no observed values"
        )));
    }
    let mut rng = rng_for(seed, &[0x3a55]);
    let chosen: Vec<usize> = match mechanism {
        Mechanism::Mcar => index::sample(&mut rng, observed.len(), k)
            .into_iter()
            .map(|j| observed[j])
            .collect(),
        Mechanism::Mar { predictors, strength } => {
            let mut score = vec![0.0; d.n()];
            for p in predictors {
                let c = d.require(p)?;
                if c.missing_count() > 0 {
                    return Err(Error::data(format!("MAR predictor `{p}` has missing cells")));
                }
                for (s, v) in score.iter_mut().zip(&c.values) {
                    *s += v;
                }
            }
            let s = standardized(&score);
            let w: Vec<f64> = observed.iter().map(|&i| stats::logistic(strength * s[i])).collect();
            weighted_sample(&observed, &w, k, &mut rng)
        }
        Mechanism::MarThreshold { predictor, threshold } => {
            let c = d.require(predictor)?;
            let eligible: Vec<usize> = observed
                .iter()
                .copied()
                .filter(|&i| !c.mask[i] && c.values[i] > *threshold)
                .collect();
            if eligible.len() < k {
                return Err(Error::data(format!(
                    "only {} rows exceed the threshold, {k} deletions requested",
                    eligible.len()
                )));
            }
            index::sample(&mut rng, eligible.len(), k)
                .into_iter()
                .map(|j| eligible[j])
                .collect()
        }
        Mechanism::Nmar { strength } => {
            let vals: Vec<f64> = observed.iter().map(|&i| col.values[i]).collect();
            if strength.is_infinite() && *strength > 0.0 {
                let mut order: Vec<usize> = (0..observed.len()).collect();
                order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
                order.into_iter().take(k).map(|j| observed[j]).collect()
            } else {
                let s = standardized(&vals);
                let w: Vec<f64> = s.iter().map(|v| stats::logistic(strength * v)).collect();
                weighted_sample(&observed, &w, k, &mut rng)
            }
        }
    };
    let mut out = d.clone();
    let c = out.column_mut(target).expect("checked above");
    for i in chosen {
        c.mask[i] = true;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(effect: EffectForm, seed: u64) -> DgpSpec {
        DgpSpec {
            effect,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn trivial_oracles() {
        let null = spec(EffectForm::Null, 1);
        assert_eq!(oracle_truth(&null, &Estimand::Ate).unwrap().values, vec![0.0]);
        let c = spec(EffectForm::Constant { tau: 3.0 }, 1);
        assert_eq!(oracle_truth(&c, &Estimand::Ate).unwrap().values, vec![3.0]);
        let s = spec(EffectForm::Subgroup { tau: 3.0, moderator: 1 }, 1);
        assert_eq!(oracle_truth(&s, &Estimand::Ate).unwrap().values, vec![1.5]);
        assert!("bogus".parse::<Estimand>().is_err());
        assert_eq!(
            "leap:0:37".parse::<Estimand>().unwrap(),
            Estimand::Leap { a0: 0.0, a1: 37.0 }
        );
    }

    #[test]
    fn sample_ate_of_subgroup_counts_positive_moderators() {
        let s = gen_binary_dgp(&spec(EffectForm::Subgroup { tau: 3.0, moderator: 1 }, 4)).unwrap();
        let x1 = &s.data.require("x1").unwrap().values;
        let share = x1.iter().filter(|&&v| v > 0.0).count() as f64 / x1.len() as f64;
        assert!((s.sample_ate() - 3.0 * share).abs() < 1e-12);
    }

    #[test]
    fn plateau_shape() {
        let s = spec(EffectForm::Dose { shape: DoseShape::Plateau, rise: 4.0 }, 0);
        assert_eq!(s.g(80.0) - s.g(40.0), 0.0);
        assert_eq!(s.g(0.0), 0.0);
        assert_eq!(s.g(40.0), 4.0);
        assert_eq!(s.g(20.0), 3.0);
        let flat = spec(EffectForm::Dose { shape: DoseShape::Flat, rise: 4.0 }, 0);
        let curve = oracle_truth(&flat, &"adrf".parse().unwrap()).unwrap().values;
        assert_eq!(curve.len(), 9);
        assert!(curve.iter().all(|&v| v == curve[0]));
    }

    #[test]
    fn monte_carlo_adrf_matches_closed_form() {
        let mut s = spec(EffectForm::Dose { shape: DoseShape::Plateau, rise: 4.0 }, 0);
        s.baseline = Baseline::Nonlinear;
        let grid: Vec<f64> = (0..=8).map(|k| 10.0 * k as f64).collect();
        let (mc, se) = monte_carlo_adrf(&s, &grid, 1_000_000, 11);
        let exact = oracle_adrf(&s, &grid);
        assert!(se < 0.003);
        for (a, b) in mc.iter().zip(&exact) {
            assert!((a - b).abs() < 0.01, "{a} vs {b}");
        }
    }

    #[test]
    fn randomized_assignment_recovers_ate() {
        // with no confounding the difference in group means is unbiased
        let mut hits = 0;
        for seed in 0..20 {
            let mut s = spec(EffectForm::Constant { tau: 3.0 }, seed);
            s.confounding = 0.0;
            let sim = gen_binary_dgp(&s).unwrap();
            let z = &sim.data.require("z").unwrap().values;
            let y = &sim.data.require("y").unwrap().values;
            let (y1, y0): (Vec<f64>, Vec<f64>) = {
                let a = (0..z.len()).filter(|&i| z[i] == 1.0).map(|i| y[i]).collect();
                let b = (0..z.len()).filter(|&i| z[i] == 0.0).map(|i| y[i]).collect();
                (a, b)
            };
            let diff = stats::mean(&y1) - stats::mean(&y0);
            let se = (stats::variance(&y1) / y1.len() as f64 + stats::variance(&y0) / y0.len() as f64).sqrt();
            hits += ((diff - 3.0).abs() <= 3.0 * se) as usize;
        }
        assert!(hits >= 19, "{hits}/20");
    }

    #[test]
    fn dose_range_and_determinism() {
        let s = spec(EffectForm::Dose { shape: DoseShape::Linear, rise: 2.0 }, 3);
        let a = gen_dose_dgp(&s).unwrap();
        let b = gen_dose_dgp(&s).unwrap();
        assert_eq!(a, b);
        let dose = &a.data.require("dose").unwrap().values;
        assert!(dose.iter().all(|&v| (0.0..=80.0).contains(&v) && v.fract() == 0.0));
        let mut low = s.clone();
        low.dose = DoseDistribution::ConcentratedLow;
        let c = gen_dose_dgp(&low).unwrap();
        let high = c.data.require("dose").unwrap().values.iter().filter(|&&v| v > 40.0).count();
        assert!((high as f64) < 0.3 * c.data.n() as f64);
        assert!(gen_binary_dgp(&s).is_err());
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(EffectForm::Null, 0);
        s.n = 10;
        assert!(gen_binary_dgp(&s).is_err());
        let mut s = spec(EffectForm::Null, 0);
        s.noise_sd = 0.0;
        assert!(gen_binary_dgp(&s).is_err());
    }

    #[test]
    fn mcar_count_and_values_untouched() {
        let sim = gen_binary_dgp(&spec(EffectForm::Null, 2)).unwrap();
        let d = apply_missingness(&sim.data, "y", &Mechanism::Mcar, 0.3, 5).unwrap();
        let c = d.require("y").unwrap();
        assert_eq!(c.missing_count(), 300);
        assert_eq!(c.values, sim.data.require("y").unwrap().values);
        assert!(apply_missingness(&sim.data, "y", &Mechanism::Mcar, 1.0, 5).is_err());
    }

    #[test]
    fn mar_threshold_respects_threshold() {
        let sim = gen_binary_dgp(&spec(EffectForm::Null, 2)).unwrap();
        let m = Mechanism::MarThreshold {
            predictor: "x1".into(),
            threshold: 0.0,
        };
        let d = apply_missingness(&sim.data, "y", &m, 0.2, 1).unwrap();
        let x1 = &d.require("x1").unwrap().values;
        for i in d.require("y").unwrap().missing_rows() {
            assert!(x1[i] > 0.0);
        }
        let m = Mechanism::Mar {
            predictors: vec!["x1".into()],
            strength: 2.0,
        };
        let d = apply_missingness(&sim.data, "y", &m, 0.3, 1).unwrap();
        let rows = d.require("y").unwrap().missing_rows();
        let mean_missing = stats::mean(&rows.iter().map(|&i| x1[i]).collect::<Vec<_>>());
        assert!(mean_missing > 0.3);
    }

    #[test]
    fn nmar_top_decile_lowers_observed_mean() {
        let sim = gen_binary_dgp(&spec(EffectForm::Null, 2)).unwrap();
        let d = apply_missingness(&sim.data, "y", &Mechanism::Nmar { strength: f64::INFINITY }, 0.1, 1).unwrap();
        let c = d.require("y").unwrap();
        assert!(stats::mean(&c.observed()) < stats::mean(&c.values));
        let cutoff = c.missing_rows().iter().map(|&i| c.values[i]).fold(f64::INFINITY, f64::min);
        assert!(c.observed().iter().all(|&v| v <= cutoff));
    }
}
