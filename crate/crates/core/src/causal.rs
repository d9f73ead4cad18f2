//! Treatment effects computed from BART posterior draws.
//!
//! Each counterfactual prediction is rounded, per posterior draw, to a
//! power-of-two grid two bits coarser than double precision at that draw's
//! prediction bound. Unit-level sums are then exact integers, so leaps
//! telescope and subgroup sums recombine to the overall effect without
//! rounding error.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bart::{posterior_sd, predict_posterior, BartFit};
use crate::dataset::{ColumnKind, Dataset};
use crate::design::Design;
use crate::error::{Error, Result};
use crate::forest::{fit_forest, ForestParams, Response};
use crate::stats;

pub const DEFAULT_GRID: [f64; 9] = [0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0];
pub const LEAP_PRESET: [(f64, f64); 3] = [(0.0, 37.0), (37.0, 80.0), (0.0, 80.0)];
pub const PROPENSITY_CLIP: (f64, f64) = (0.01, 0.99);
pub const PROPENSITY_FEATURE: &str = "propensity";
/// Grid doses beyond this multiple of the largest observed dose draw a warning.
pub const GRID_WARN_FACTOR: f64 = 1.2;
const GRID_BITS: i32 = 51;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentMode {
    BinaryMedian,
    Continuous,
}

fn default_grid() -> Vec<f64> {
    DEFAULT_GRID.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentSpec {
    pub column: String,
    pub mode: TreatmentMode,
    /// Resolved from the data when absent.
    #[serde(default)]
    pub cutoff: Option<f64>,
    #[serde(default = "default_grid")]
    pub grid: Vec<f64>,
}

impl TreatmentSpec {
    pub fn new(column: &str, mode: TreatmentMode) -> Self {
        Self {
            column: column.to_string(),
            mode,
            cutoff: None,
            grid: default_grid(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::config("dose grid is empty"));
        }
        if self.grid.iter().any(|g| !g.is_finite()) || self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("dose grid must be finite and strictly increasing"));
        }
        Ok(())
    }
}

/// Median split with ties to the low group: `z = 1` iff `dose > median`.
pub fn binarize_by_median(dose: &[f64]) -> Result<(f64, Vec<f64>)> {
    let cutoff = stats::median(dose);
    if !cutoff.is_finite() {
        return Err(Error::data("cannot binarize an empty dose column"));
    }
    Ok((cutoff, binarize_at(dose, cutoff)?))
}

pub fn binarize_at(dose: &[f64], cutoff: f64) -> Result<Vec<f64>> {
    let z: Vec<f64> = dose.iter().map(|&a| (a > cutoff) as u8 as f64).collect();
    let high = z.iter().filter(|&&v| v == 1.0).count();
    if high == 0 || high == z.len() {
        return Err(Error::data(format!(
            "splitting doses at {cutoff} leaves one group empty"
        )));
    }
    Ok(z)
}

/// Out-of-bag probability of `z = 1` from a classification forest, clipped
/// to [`PROPENSITY_CLIP`].
pub fn fit_propensity(x: &Array2<f64>, z: &[f64], p: &ForestParams) -> Result<Vec<f64>> {
    let labels: Vec<usize> = z.iter().map(|&v| (v == 1.0) as usize).collect();
    let ones = labels.iter().sum::<usize>();
    if ones == 0 || ones == labels.len() {
        return Err(Error::data("propensity model needs both treatment groups"));
    }
    let forest = fit_forest(x, &Response::Classes { labels, n_classes: 2 }, p)?;
    Ok(forest
        .predict_proba_oob(x)?
        .into_iter()
        .map(|pr| pr[1].clamp(PROPENSITY_CLIP.0, PROPENSITY_CLIP.1))
        .collect())
}

/// Feature name of the high-treatment indicator.
pub fn indicator_name(column: &str) -> String {
    format!("{column}_high")
}

/// Covariates, the treatment indicator and the propensity score.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryDesign {
    pub design: Design,
    pub z: Vec<f64>,
    pub cutoff: f64,
    pub propensity: Vec<f64>,
    /// Position of the indicator among the features.
    pub z_col: usize,
}

/// A binary treatment column is used as is (cutoff 0); any other is split
/// at its median.
pub fn resolve_groups(d: &Dataset, column: &str, cutoff: Option<f64>) -> Result<(f64, Vec<f64>)> {
    let c = d.require(column)?;
    if c.mask.iter().any(|&m| m) {
        return Err(Error::data(format!("treatment `{column}` has missing cells")));
    }
    match (cutoff, c.kind) {
        (Some(t), _) => Ok((t, binarize_at(&c.values, t)?)),
        (None, ColumnKind::Binary) => Ok((0.0, binarize_at(&c.values, 0.0)?)),
        (None, _) => binarize_by_median(&c.values),
    }
}

pub fn binary_design(
    d: &Dataset,
    covariates: &[String],
    spec: &TreatmentSpec,
    propensity: &ForestParams,
) -> Result<BinaryDesign> {
    let (cutoff, z) = resolve_groups(d, &spec.column, spec.cutoff)?;
    let base = Design::from_dataset(d, covariates)?;
    let score = fit_propensity(&base.x, &z, propensity)?;
    let design = base
        .with_column(&indicator_name(&spec.column), &z)?
        .with_column(PROPENSITY_FEATURE, &score)?;
    let z_col = design.n_features() - 2;
    Ok(BinaryDesign {
        design,
        z,
        cutoff,
        propensity: score,
        z_col,
    })
}

/// Covariates plus the dose; returns the dose's feature position.
pub fn dose_design(d: &Dataset, covariates: &[String], column: &str) -> Result<(Design, usize)> {
    let mut cols = covariates.to_vec();
    cols.push(column.to_string());
    let x = Design::from_dataset(d, &cols)?;
    let j = x.require(column)?;
    Ok((x, j))
}

fn quantum(bound: f64) -> f64 {
    let b = bound.max(f64::MIN_POSITIVE);
    2f64.powi(b.log2().ceil() as i32 - GRID_BITS)
}

/// Per-draw grid spacing used for fixed-point aggregation.
pub fn quanta(fit: &BartFit) -> Vec<f64> {
    (0..fit.n_keep()).map(|t| quantum(fit.prediction_bound(t))).collect()
}

/// Nearest integer to `s / n`, ties to even.
fn div_round(s: i128, n: i128) -> i128 {
    let q = s.div_euclid(n);
    let r = s.rem_euclid(n);
    if 2 * r > n || (2 * r == n && q % 2 != 0) {
        q + 1
    } else {
        q
    }
}

/// Posterior draws of f under one counterfactual assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDraws {
    /// `draw × unit` predictions in units of the draw's quantum.
    pub fixed: Array2<i64>,
    pub quanta: Vec<f64>,
    /// Posterior sd per unit, from the unrounded predictions.
    pub sd: Vec<f64>,
}

impl StateDraws {
    pub fn predict(fit: &BartFit, x: &Design) -> Result<Self> {
        let values = predict_posterior(fit, x)?;
        let quanta = quanta(fit);
        let mut fixed = Array2::zeros(values.dim());
        for ((t, i), v) in values.indexed_iter() {
            fixed[[t, i]] = (v / quanta[t]).round() as i64;
        }
        Ok(Self {
            fixed,
            quanta,
            sd: posterior_sd(&values),
        })
    }

    pub fn n_units(&self) -> usize {
        self.fixed.ncols()
    }

    /// Per-draw unit sum over all units.
    fn sums(&self) -> Vec<i128> {
        self.fixed
            .outer_iter()
            .map(|r| r.iter().map(|&v| v as i128).sum())
            .collect()
    }

    /// Per-draw mean over units, rounded to the grid.
    pub fn mean_fixed(&self) -> Vec<i128> {
        let n = self.n_units() as i128;
        self.sums().into_iter().map(|s| div_round(s, n)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ExactMean {
    sums: Vec<i128>,
    count: u64,
    quanta: Vec<f64>,
}

impl ExactMean {
    fn values(&self) -> Vec<f64> {
        self.sums
            .iter()
            .zip(&self.quanta)
            .map(|(&s, &q)| s as f64 * q / self.count as f64)
            .collect()
    }
}

/// Posterior draws of one scalar estimand from one imputation.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectDraws {
    pub estimand: String,
    pub imputation: usize,
    pub draws: Vec<f64>,
    exact: Option<ExactMean>,
}

impl EffectDraws {
    pub fn new(estimand: impl Into<String>, imputation: usize, draws: Vec<f64>) -> Self {
        Self {
            estimand: estimand.into(),
            imputation,
            draws,
            exact: None,
        }
    }

    fn from_exact(estimand: impl Into<String>, exact: ExactMean) -> Self {
        Self {
            estimand: estimand.into(),
            imputation: 0,
            draws: exact.values(),
            exact: Some(exact),
        }
    }

    pub fn with_imputation(mut self, k: usize) -> Self {
        self.imputation = k;
        self
    }

    pub fn mean(&self) -> f64 {
        stats::mean(&self.draws)
    }

    /// Posterior variance, used as the within-imputation variance.
    pub fn variance(&self) -> f64 {
        stats::variance(&self.draws)
    }

    /// Central posterior interval from empirical quantiles.
    pub fn interval(&self, level: f64) -> (f64, f64) {
        let mut v = self.draws.clone();
        v.sort_by(f64::total_cmp);
        (
            stats::quantile_sorted(&v, 0.5 * (1.0 - level)),
            stats::quantile_sorted(&v, 0.5 * (1.0 + level)),
        )
    }

    /// Number of units averaged, for unit-level aggregates.
    pub fn unit_count(&self) -> Option<u64> {
        self.exact.as_ref().map(|e| e.count)
    }
}

/// Size-weighted recombination of disjoint subgroup effects. Exact: on the
/// subgroups of a partition it reproduces the overall average bit for bit.
pub fn recombine(parts: &[EffectDraws], estimand: &str) -> Result<EffectDraws> {
    let exact: Vec<&ExactMean> = parts
        .iter()
        .map(|p| {
            p.exact
                .as_ref()
                .ok_or_else(|| Error::numeric(format!("`{}` is not a unit-level average", p.estimand)))
        })
        .collect::<Result<_>>()?;
    let first = exact.first().ok_or_else(|| Error::numeric("nothing to recombine"))?;
    if exact.iter().any(|e| e.quanta != first.quanta) {
        return Err(Error::numeric("subgroups come from different fits"));
    }
    let mut sums = vec![0i128; first.sums.len()];
    let mut count = 0;
    for e in &exact {
        for (s, v) in sums.iter_mut().zip(&e.sums) {
            *s += v;
        }
        count += e.count;
    }
    Ok(EffectDraws::from_exact(
        estimand,
        ExactMean {
            sums,
            count,
            quanta: first.quanta.clone(),
        },
    )
    .with_imputation(parts[0].imputation))
}

/// Predictions with the treatment indicator set to 1 and to 0 for every unit.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryCounterfactuals {
    pub treated: StateDraws,
    pub control: StateDraws,
}

impl BinaryCounterfactuals {
    pub fn compute(fit: &BartFit, bd: &BinaryDesign) -> Result<Self> {
        Ok(Self {
            treated: StateDraws::predict(fit, &bd.design.with_constant(bd.z_col, 1.0))?,
            control: StateDraws::predict(fit, &bd.design.with_constant(bd.z_col, 0.0))?,
        })
    }

    pub fn unit_effects(&self) -> UnitEffects {
        UnitEffects {
            fixed: &self.treated.fixed - &self.control.fixed,
            quanta: self.treated.quanta.clone(),
        }
    }
}

/// Per-draw, per-unit effects `f(x_i, 1) - f(x_i, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitEffects {
    fixed: Array2<i64>,
    quanta: Vec<f64>,
}

impl UnitEffects {
    pub fn n_units(&self) -> usize {
        self.fixed.ncols()
    }

    pub fn n_draws(&self) -> usize {
        self.fixed.nrows()
    }

    /// Effect draws of unit `i`; exact multiples of each draw's quantum.
    pub fn unit_draws(&self, i: usize) -> Vec<f64> {
        self.fixed
            .column(i)
            .iter()
            .zip(&self.quanta)
            .map(|(&v, &q)| v as f64 * q)
            .collect()
    }

    pub fn average(&self, rows: &[usize], estimand: &str) -> Result<EffectDraws> {
        if rows.is_empty() {
            return Err(Error::data(format!("`{estimand}` averages over an empty set of units")));
        }
        let sums = self
            .fixed
            .outer_iter()
            .map(|r| rows.iter().map(|&i| r[i] as i128).sum())
            .collect();
        Ok(EffectDraws::from_exact(
            estimand,
            ExactMean {
                sums,
                count: rows.len() as u64,
                quanta: self.quanta.clone(),
            },
        ))
    }
}

pub const ATE: &str = "ate";

/// ATE draws over all units, or over the units flagged in `keep`.
pub fn ate_from(cf: &BinaryCounterfactuals, keep: Option<&[bool]>) -> Result<EffectDraws> {
    let ue = cf.unit_effects();
    let rows: Vec<usize> = match keep {
        None => (0..ue.n_units()).collect(),
        Some(k) => {
            if k.len() != ue.n_units() {
                return Err(Error::schema("support flags do not match the unit count"));
            }
            (0..k.len()).filter(|&i| k[i]).collect()
        }
    };
    ue.average(&rows, ATE)
}

pub fn estimate_ate(fit: &BartFit, bd: &BinaryDesign, keep: Option<&[bool]>) -> Result<EffectDraws> {
    ate_from(&BinaryCounterfactuals::compute(fit, bd)?, keep)
}

/// Predictions with every unit's dose set to each of a list of values.
#[derive(Debug, Clone, PartialEq)]
pub struct DoseCounterfactuals {
    pub doses: Vec<f64>,
    pub states: Vec<StateDraws>,
    means: Vec<Vec<i128>>,
    /// Largest dose in the design, for out-of-range warnings.
    pub max_observed: f64,
}

impl DoseCounterfactuals {
    pub fn compute(fit: &BartFit, x: &Design, dose_col: usize, doses: &[f64]) -> Result<Self> {
        let mut uniq = doses.to_vec();
        uniq.sort_by(f64::total_cmp);
        uniq.dedup();
        let states = uniq
            .iter()
            .map(|&a| StateDraws::predict(fit, &x.with_constant(dose_col, a)))
            .collect::<Result<Vec<_>>>()?;
        let means = states.iter().map(StateDraws::mean_fixed).collect();
        let max_observed = x.x.column(dose_col).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            doses: uniq,
            states,
            means,
            max_observed,
        })
    }

    fn index(&self, a: f64) -> Result<usize> {
        self.doses
            .iter()
            .position(|&d| d == a)
            .ok_or_else(|| Error::config(format!("dose {a} was not evaluated")))
    }

    pub fn state(&self, a: f64) -> Result<&StateDraws> {
        Ok(&self.states[self.index(a)?])
    }

    fn quanta(&self) -> &[f64] {
        &self.states[0].quanta
    }

    pub fn adrf(&self, grid: &[f64]) -> Result<AdrfDraws> {
        let n_keep = self.quanta().len();
        let mut draws = Array2::zeros((n_keep, grid.len()));
        for (k, &a) in grid.iter().enumerate() {
            let m = &self.means[self.index(a)?];
            for t in 0..n_keep {
                draws[[t, k]] = m[t] as f64 * self.quanta()[t];
            }
        }
        let warnings = grid
            .iter()
            .filter(|&&a| a > GRID_WARN_FACTOR * self.max_observed)
            .map(|a| {
                format!(
                    "grid dose {a} exceeds {GRID_WARN_FACTOR} x the largest observed dose {}",
                    self.max_observed
                )
            })
            .collect();
        let cols: Vec<Vec<f64>> = (0..grid.len()).map(|k| draws.column(k).to_vec()).collect();
        Ok(AdrfDraws {
            grid: grid.to_vec(),
            mean: cols.iter().map(|c| stats::mean(c)).collect(),
            sd: cols.iter().map(|c| stats::sd(c)).collect(),
            draws,
            warnings,
        })
    }

    /// Per-draw `ADRF(a1) - ADRF(a0)`.
    pub fn leap(&self, a0: f64, a1: f64) -> Result<EffectDraws> {
        let (m0, m1) = (&self.means[self.index(a0)?], &self.means[self.index(a1)?]);
        let draws = m0
            .iter()
            .zip(m1)
            .zip(self.quanta())
            .map(|((&lo, &hi), &q)| (hi - lo) as f64 * q)
            .collect();
        Ok(EffectDraws::new(leap_label(a0, a1), 0, draws))
    }
}

pub fn leap_label(a0: f64, a1: f64) -> String {
    format!("leap:{a0}->{a1}")
}

/// One imputation's average dose-response draws over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AdrfDraws {
    pub grid: Vec<f64>,
    /// `draw × grid` values.
    pub draws: Array2<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub warnings: Vec<String>,
}

impl AdrfDraws {
    /// Posterior variance per grid point.
    pub fn variance(&self) -> Vec<f64> {
        self.sd.iter().map(|s| s * s).collect()
    }
}

pub fn estimate_adrf(fit: &BartFit, x: &Design, dose_col: usize, grid: &[f64]) -> Result<AdrfDraws> {
    DoseCounterfactuals::compute(fit, x, dose_col, grid)?.adrf(grid)
}

pub fn estimate_leap(fit: &BartFit, x: &Design, dose_col: usize, a0: f64, a1: f64) -> Result<EffectDraws> {
    DoseCounterfactuals::compute(fit, x, dose_col, &[a0, a1])?.leap(a0, a1)
}

/// How a moderator column is cut into subgroups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "binning", rename_all = "snake_case")]
pub enum Binning {
    /// Levels for binary/categorical columns, quartile bins otherwise.
    #[default]
    Auto,
    /// Two groups: `<= threshold` and `> threshold`.
    Threshold { threshold: f64 },
}

/// Named groups of unit indices, in a fixed order.
pub fn subgroups(d: &Dataset, moderator: &str, binning: Binning) -> Result<Vec<(String, Vec<usize>)>> {
    let c = d.require(moderator)?;
    if c.mask.iter().any(|&m| m) {
        return Err(Error::data(format!("moderator `{moderator}` has missing cells")));
    }
    let n = c.len();
    let groups: Vec<(String, Vec<usize>)> = match (binning, c.kind) {
        (Binning::Threshold { threshold }, _) => vec![
            (format!("{moderator}<={threshold}"), (0..n).filter(|&i| c.values[i] <= threshold).collect()),
            (format!("{moderator}>{threshold}"), (0..n).filter(|&i| c.values[i] > threshold).collect()),
        ],
        (Binning::Auto, ColumnKind::Categorical) => (0..c.levels.len())
            .map(|k| {
                (
                    format!("{moderator}={}", c.levels[k]),
                    (0..n).filter(|&i| c.values[i] as usize == k).collect(),
                )
            })
            .collect(),
        (Binning::Auto, ColumnKind::Binary) => (0..2)
            .map(|k| {
                (
                    format!("{moderator}={k}"),
                    (0..n).filter(|&i| c.values[i] == k as f64).collect(),
                )
            })
            .collect(),
        (Binning::Auto, _) => {
            let q: Vec<f64> = [0.25, 0.5, 0.75].iter().map(|&p| stats::quantile(&c.values, p)).collect();
            let bin = |v: f64| q.iter().filter(|&&e| v > e).count();
            (0..4)
                .map(|b| {
                    (
                        format!("{moderator}:q{}", b + 1),
                        (0..n).filter(|&i| bin(c.values[i]) == b).collect(),
                    )
                })
                .collect()
        }
    };
    if let Some((name, _)) = groups.iter().find(|(_, rows)| rows.is_empty()) {
        return Err(Error::data(format!("subgroup `{name}` is empty")));
    }
    Ok(groups)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cate {
    pub subgroups: Vec<EffectDraws>,
    /// For each pair `i < j`: subgroup `j` minus subgroup `i`, per draw.
    pub differences: Vec<EffectDraws>,
}

pub fn estimate_cate(ue: &UnitEffects, groups: &[(String, Vec<usize>)]) -> Result<Cate> {
    let subgroups = groups
        .iter()
        .map(|(name, rows)| ue.average(rows, &format!("cate:{name}")))
        .collect::<Result<Vec<_>>>()?;
    let mut differences = Vec::new();
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let draws = subgroups[j]
                .draws
                .iter()
                .zip(&subgroups[i].draws)
                .map(|(a, b)| a - b)
                .collect();
            differences.push(EffectDraws::new(
                format!("cate_diff:{}-{}", groups[j].0, groups[i].0),
                0,
                draws,
            ));
        }
    }
    Ok(Cate {
        subgroups,
        differences,
    })
}

/// CSV with columns `imputation, draw, estimand, value`.
pub fn write_effect_draws<W: Write>(w: W, effects: &[EffectDraws]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::data(format!("writing effect draws: {e}"));
    wr.write_record(["imputation", "draw", "estimand", "value"])
        .map_err(err)?;
    for e in effects {
        for (t, v) in e.draws.iter().enumerate() {
            wr.write_record([
                e.imputation.to_string(),
                (t + 1).to_string(),
                e.estimand.clone(),
                v.to_string(),
            ])
            .map_err(err)?;
        }
    }
    wr.flush().map_err(|e| Error::data(format!("writing effect draws: {e}")))
}
