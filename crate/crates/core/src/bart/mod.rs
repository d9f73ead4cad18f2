//! Bayesian additive regression trees.
//!
//! The outcome is rescaled so its extremes map to ±0.5. Leaves get a
//! `Normal(0, (0.5 / (k √m))²)` prior for `m` trees, and the residual
//! variance a scaled inverse-χ² prior whose scale puts prior mass `q`
//! below the residual sd of a least-squares fit.

mod sampler;
mod tree;

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub use sampler::{leaf_marginal, MoveKind, MoveOutcome, MoveStats, Prior, Sampler};
pub use tree::{RegNode, RegTree};

use crate::design::Design;
use crate::error::{Error, Result};
use crate::stats::{self, rng_for};

/// Lower bound on the residual-scale estimate, on the standardised scale.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BartParams {
    pub n_trees: usize,
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
    pub nu: f64,
    pub q: f64,
    pub n_burn: usize,
    pub n_keep: usize,
    pub seed: u64,
}

impl Default for BartParams {
    fn default() -> Self {
        Self {
            n_trees: 200,
            k: 2.0,
            alpha: 0.95,
            beta: 2.0,
            nu: 3.0,
            q: 0.90,
            n_burn: 200,
            n_keep: 1000,
            seed: 0,
        }
    }
}

impl BartParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("bart: {m}")));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be >= 0");
        }
        if !(self.nu > 0.0) {
            return bad("nu must be > 0");
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return bad("q must lie in (0, 1)");
        }
        if !(self.k > 0.0) {
            return bad("k must be > 0");
        }
        if self.n_trees == 0 {
            return bad("n_trees must be >= 1");
        }
        if self.n_keep == 0 {
            return bad("n_keep must be >= 1");
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// One retained posterior state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub trees: Vec<RegTree>,
    /// Residual sd on the training outcome scale.
    pub sigma: f64,
}

impl Draw {
    /// Sum of per-tree outputs on the standardised scale, in tree order.
    #[inline]
    pub fn sum_of_trees(&self, row: &[f64]) -> f64 {
        let mut s = 0.0;
        for t in &self.trees {
            s += t.predict(row);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BartFit {
    pub draws: Vec<Draw>,
    pub y_center: f64,
    pub y_scale: f64,
    pub feature_names: Vec<String>,
    pub params: BartParams,
    pub prior: Prior,
    pub move_stats: MoveStats,
}

const FIT_MAGIC: &[u8; 8] = b"BARTFIT1";

impl BartFit {
    pub fn n_keep(&self) -> usize {
        self.draws.len()
    }

    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.y_center) / self.y_scale
    }

    pub fn destandardize(&self, s: f64) -> f64 {
        self.y_center + self.y_scale * s
    }

    /// Bound on `|prediction|` for draw `d` at any input.
    pub fn prediction_bound(&self, d: usize) -> f64 {
        let spread: f64 = self.draws[d]
            .trees
            .iter()
            .map(|t| t.leaf_values().fold(0.0f64, |m, v| m.max(v.abs())))
            .sum();
        self.y_center.abs() + self.y_scale * spread
    }

    fn check_schema(&self, x: &Design) -> Result<()> {
        if x.names != self.feature_names {
            return Err(Error::schema(format!(
                "prediction features {:?} differ from training features {:?}",
                x.names, self.feature_names
            )));
        }
        Ok(())
    }

    /// Write as a magic header followed by a bincode body. Floats are stored
    /// bit-exactly, so a reloaded fit predicts identically.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(FIT_MAGIC)
            .map_err(|e| Error::io("<fit artifact>", e))?;
        bincode::serialize_into(w, self).map_err(|e| Error::data(format!("encoding fit: {e}")))
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| Error::io("<fit artifact>", e))?;
        if &magic != FIT_MAGIC {
            return Err(Error::data("not a BART fit artifact"));
        }
        bincode::deserialize_from(r).map_err(|e| Error::data(format!("decoding fit: {e}")))
    }
}

/// Residual sd of an intercept-plus-linear least-squares fit, or the sample
/// sd of `y` when the system has no residual degrees of freedom.
fn least_squares_sd(x: &Array2<f64>, y: &[f64]) -> f64 {
    let (n, p) = x.dim();
    if n <= p + 1 {
        return stats::sd(y);
    }
    let a = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[[i, j - 1]] });
    let b = DVector::from_column_slice(y);
    let svd = a.clone().svd(true, true);
    match svd.solve(&b, 1e-10) {
        Ok(beta) => {
            let resid: Vec<f64> = (&b - &a * beta).iter().copied().collect();
            stats::sd(&resid)
        }
        Err(_) => stats::sd(y),
    }
}

pub fn fit_bart(x: &Design, y: &[f64], p: &BartParams) -> Result<BartFit> {
    p.validate()?;
    let n = x.n_rows();
    if y.len() != n {
        return Err(Error::schema(format!("{} outcomes for {} rows", y.len(), n)));
    }
    if n < 10 {
        return Err(Error::data(format!("bart needs at least 10 rows, got {n}")));
    }
    if x.x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::data("bart inputs must be finite (impute missing cells first)"));
    }

    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let y_center = 0.5 * (lo + hi);
    let y_scale = if hi > lo { hi - lo } else { 1.0 };
    let y_std: Vec<f64> = y.iter().map(|v| (v - y_center) / y_scale).collect();

    let sigma_hat = least_squares_sd(&x.x, &y_std).max(SIGMA_FLOOR);
    let chi = ChiSquared::new(p.nu).map_err(|e| Error::numeric(e.to_string()))?;
    // P(sigma^2 < sigma_hat^2) = q  <=>  lambda = sigma_hat^2 * F^{-1}(1 - q) / nu
    let lambda = sigma_hat * sigma_hat * chi.inverse_cdf(1.0 - p.q) / p.nu;
    let prior = Prior {
        alpha: p.alpha,
        beta: p.beta,
        leaf_sd: 0.5 / (p.k * (p.n_trees as f64).sqrt()),
        nu: p.nu,
        lambda,
    };

    let mut sampler = Sampler::new(&x.x, y_std, p.n_trees, prior, sigma_hat, rng_for(p.seed, &[0xba27]));
    for _ in 0..p.n_burn {
        sampler.sweep();
    }
    let mut draws = Vec::with_capacity(p.n_keep);
    for _ in 0..p.n_keep {
        sampler.sweep();
        draws.push(Draw {
            trees: sampler.snapshot(),
            sigma: sampler.sigma() * y_scale,
        });
    }
    if draws.iter().any(|d| !(d.sigma > 0.0 && d.sigma.is_finite())) {
        return Err(Error::numeric("non-positive residual scale draw"));
    }
    Ok(BartFit {
        draws,
        y_center,
        y_scale,
        feature_names: x.names.clone(),
        params: p.clone(),
        prior,
        move_stats: sampler.move_stats(),
    })
}

/// Posterior draws of f at each row of `x`: an `n_keep × rows` matrix on the
/// training outcome scale. No residual noise is added.
pub fn predict_posterior(fit: &BartFit, x: &Design) -> Result<Array2<f64>> {
    fit.check_schema(x)?;
    let rows: Vec<Vec<f64>> = x.x.rows().into_iter().map(|r| r.to_vec()).collect();
    let per_draw: Vec<Vec<f64>> = fit
        .draws
        .par_iter()
        .map(|d| {
            rows.iter()
                .map(|r| fit.destandardize(d.sum_of_trees(r)))
                .collect()
        })
        .collect();
    let mut out = Array2::zeros((fit.n_keep(), rows.len()));
    for (d, v) in per_draw.into_iter().enumerate() {
        for (i, val) in v.into_iter().enumerate() {
            out[[d, i]] = val;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub mean: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Per-column mean, sample sd and central `level` interval from empirical
/// quantiles `(1 - level)/2` and `(1 + level)/2`.
pub fn posterior_summary(draws: &Array2<f64>, level: f64) -> Result<Vec<PointSummary>> {
    if draws.nrows() == 0 {
        return Err(Error::numeric("no posterior draws to summarise"));
    }
    Ok(draws
        .columns()
        .into_iter()
        .map(|c| summarize_draws(&c.to_vec(), level))
        .collect())
}

pub fn summarize_draws(v: &[f64], level: f64) -> PointSummary {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    PointSummary {
        mean: stats::mean(v),
        sd: stats::sd(v),
        lo: stats::quantile_sorted(&s, 0.5 * (1.0 - level)),
        hi: stats::quantile_sorted(&s, 0.5 * (1.0 + level)),
    }
}

/// Per-column posterior sd (n - 1 denominator).
pub fn posterior_sd(draws: &Array2<f64>) -> Vec<f64> {
    draws
        .columns()
        .into_iter()
        .map(|c| stats::sd(&c.to_vec()))
        .collect()
}
