//! Rubin's rules for combining per-imputation estimates.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::stats;

/// Degrees-of-freedom rule for the pooled t reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum DfMethod {
    /// `(m - 1)(1 + 1/riv)^2`.
    #[default]
    Classical,
    /// Small-sample adjustment given the complete-data degrees of freedom.
    BarnardRubin { complete_df: f64 },
}

/// A pooled scalar estimand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledEffect {
    pub qbar: f64,
    /// Mean within-imputation variance.
    pub within: f64,
    /// Between-imputation variance.
    pub between: f64,
    pub total: f64,
    pub se: f64,
    /// Infinite when the between-imputation variance is zero.
    pub df: f64,
    pub riv: f64,
    pub fmi: f64,
    pub ci: (f64, f64),
    pub level: f64,
    pub m: usize,
}

pub fn pool_rubin(estimates: &[f64], variances: &[f64], level: f64) -> Result<PooledEffect> {
    pool_rubin_with(estimates, variances, level, DfMethod::Classical)
}

pub fn pool_rubin_with(
    estimates: &[f64],
    variances: &[f64],
    level: f64,
    method: DfMethod,
) -> Result<PooledEffect> {
    let m = estimates.len();
    if m < 2 {
        return Err(Error::config(format!("pooling needs m >= 2 imputations, got {m}")));
    }
    if variances.len() != m {
        return Err(Error::schema("estimates and variances differ in length"));
    }
    if variances.iter().any(|&v| v < 0.0 || v.is_nan()) {
        return Err(Error::numeric("negative within-imputation variance"));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::config(format!("interval level {level} outside (0, 1)")));
    }
    let mf = m as f64;
    // sorted accumulation keeps the result invariant to imputation order
    let qbar = stats::sorted_mean(estimates);
    let within = stats::sorted_mean(variances);
    let mut dev: Vec<f64> = estimates.iter().map(|q| (q - qbar) * (q - qbar)).collect();
    dev.sort_by(f64::total_cmp);
    let between = dev.iter().sum::<f64>() / (mf - 1.0);
    let inflation = (1.0 + 1.0 / mf) * between;
    let total = within + inflation;

    let (riv, df, fmi) = if between == 0.0 {
        (0.0, f64::INFINITY, 0.0)
    } else if within == 0.0 {
        (f64::INFINITY, mf - 1.0, 1.0)
    } else {
        let riv = inflation / within;
        let df_old = (mf - 1.0) * (1.0 + 1.0 / riv).powi(2);
        let df = match method {
            DfMethod::Classical => df_old,
            DfMethod::BarnardRubin { complete_df } => {
                let lambda = inflation / total;
                let df_obs = (complete_df + 1.0) / (complete_df + 3.0) * complete_df * (1.0 - lambda);
                1.0 / (1.0 / df_old + 1.0 / df_obs)
            }
        };
        let fmi = (riv + 2.0 / (df + 3.0)) / (1.0 + riv);
        (riv, df, fmi)
    };

    let se = total.sqrt();
    let crit = t_quantile(df, 0.5 * (1.0 + level))?;
    Ok(PooledEffect {
        qbar,
        within,
        between,
        total,
        se,
        df,
        riv,
        fmi,
        ci: (qbar - crit * se, qbar + crit * se),
        level,
        m,
    })
}

/// Above this df the quantile comes from an expansion in `1/df` around the
/// normal quantile; the incomplete-beta route loses digits there.
const T_EXPANSION_DF: f64 = 1000.0;

/// Quantile of Student's t, or of the standard normal for infinite df.
pub fn t_quantile(df: f64, p: f64) -> Result<f64> {
    if df >= T_EXPANSION_DF {
        let z = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p);
        let v = 1.0 / df;
        let z2 = z * z;
        let g1 = z * (z2 + 1.0) / 4.0;
        let g2 = z * ((5.0 * z2 + 16.0) * z2 + 3.0) / 96.0;
        let g3 = z * (((3.0 * z2 + 19.0) * z2 + 17.0) * z2 - 15.0) / 384.0;
        let g4 = z * ((((79.0 * z2 + 776.0) * z2 + 1482.0) * z2 - 1920.0) * z2 - 945.0) / 92160.0;
        return Ok(z + v * (g1 + v * (g2 + v * (g3 + v * g4))));
    }
    let t = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::numeric(format!("t({df}): {e}")))?;
    Ok(t.inverse_cdf(p))
}

/// fmi implied by a printed riv at a given m under the classical df.
pub fn fmi_from_riv(riv: f64, m: usize) -> f64 {
    let df = (m as f64 - 1.0) * (1.0 + 1.0 / riv).powi(2);
    (riv + 2.0 / (df + 3.0)) / (1.0 + riv)
}

/// Pointwise pooling of per-imputation curves over a shared grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledCurve {
    pub grid: Vec<f64>,
    /// Per-imputation mean curves, kept for plotting.
    pub per_imputation: Vec<Vec<f64>>,
    pub points: Vec<PooledEffect>,
}

impl PooledCurve {
    pub fn estimates(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.qbar).collect()
    }
}

pub fn pool_curve(
    grid: &[f64],
    means: &[Vec<f64>],
    variances: &[Vec<f64>],
    level: f64,
) -> Result<PooledCurve> {
    if means.len() != variances.len() {
        return Err(Error::schema("curve means and variances differ in count"));
    }
    for c in means.iter().chain(variances) {
        if c.len() != grid.len() {
            return Err(Error::schema(format!(
                "curve of length {} does not match grid of length {}",
                c.len(),
                grid.len()
            )));
        }
    }
    let points = (0..grid.len())
        .map(|k| {
            let q: Vec<f64> = means.iter().map(|c| c[k]).collect();
            let u: Vec<f64> = variances.iter().map(|c| c[k]).collect();
            pool_rubin(&q, &u, level)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PooledCurve {
        grid: grid.to_vec(),
        per_imputation: means.to_vec(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_three_imputations() {
        let p = pool_rubin(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], 0.95).unwrap();
        assert_eq!(p.qbar, 2.0);
        assert_eq!(p.within, 1.0);
        assert_eq!(p.between, 1.0);
        assert!((p.total - 7.0 / 3.0).abs() < 1e-15);
        assert!((p.riv - 4.0 / 3.0).abs() < 1e-15);
        assert!((p.df - 6.125).abs() < 1e-12);
        assert!((p.fmi - 0.6654).abs() < 5e-5);
    }

    #[test]
    fn large_df_quantiles() {
        for p in [0.9, 0.975, 0.995] {
            let reference = StudentsT::new(0.0, 1.0, 1000.0).unwrap().inverse_cdf(p);
            assert!((t_quantile(1000.0, p).unwrap() - reference).abs() < 1e-9);
            let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(p);
            assert_eq!(t_quantile(f64::INFINITY, p).unwrap(), z);
            let mut last = f64::INFINITY;
            for df in [1e3, 1e4, 1e5, 1e6, 1e9] {
                let q = t_quantile(df, p).unwrap();
                assert!(q < last && q > z);
                last = q;
            }
        }
    }

    #[test]
    fn zero_between_variance() {
        let p = pool_rubin(&[0.4; 5], &[0.2, 0.1, 0.3, 0.2, 0.2], 0.95).unwrap();
        assert_eq!(p.between, 0.0);
        assert_eq!(p.total, p.within);
        assert_eq!((p.riv, p.fmi), (0.0, 0.0));
        assert!(p.df.is_infinite());
        let z = 1.959963984540054;
        assert!((p.ci.1 - (0.4 + z * p.se)).abs() < 1e-9);
    }

    #[test]
    fn aser_row_fmi() {
        assert!((fmi_from_riv(0.432, 100) - 0.303).abs() <= 0.003);
    }

    #[test]
    fn errors() {
        assert!(pool_rubin(&[1.0], &[1.0], 0.95).is_err());
        assert!(pool_rubin(&[1.0, 2.0], &[1.0, -0.1], 0.95).is_err());
        assert!(pool_curve(&[0.0, 1.0], &[vec![1.0]], &[vec![1.0]], 0.95).is_err());
    }

    #[test]
    fn curve_matches_scalar_pooling() {
        let grid = [0.0, 10.0];
        let means = vec![vec![1.0, 2.0], vec![1.5, 2.5]];
        let vars = vec![vec![0.1, 0.2], vec![0.3, 0.4]];
        let c = pool_curve(&grid, &means, &vars, 0.9).unwrap();
        for k in 0..2 {
            let s = pool_rubin(&[means[0][k], means[1][k]], &[vars[0][k], vars[1][k]], 0.9).unwrap();
            assert_eq!(c.points[k], s);
        }
        let same = pool_curve(&grid, &vec![vec![1.0, 2.0]; 3], &vec![vec![0.1, 0.2]; 3], 0.9).unwrap();
        assert_eq!(same.estimates(), vec![1.0, 2.0]);
        assert!(same.points.iter().all(|p| p.riv == 0.0));
    }

    #[test]
    fn barnard_rubin_df_is_smaller() {
        let q = [1.0, 1.3, 0.8, 1.1];
        let u = [0.2, 0.25, 0.22, 0.21];
        let a = pool_rubin(&q, &u, 0.95).unwrap();
        let b = pool_rubin_with(&q, &u, 0.95, DfMethod::BarnardRubin { complete_df: 50.0 }).unwrap();
        assert!(b.df < a.df);
        assert_eq!(a.total, b.total);
    }

    proptest! {
        #[test]
        fn scale_equivariance(
            q in prop::collection::vec(-10.0f64..10.0, 2..12),
            c in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
        ) {
            let u: Vec<f64> = q.iter().map(|v| 0.1 + v.abs() * 0.05).collect();
            let a = pool_rubin(&q, &u, 0.95).unwrap();
            let qs: Vec<f64> = q.iter().map(|v| v * c).collect();
            let us: Vec<f64> = u.iter().map(|v| v * c * c).collect();
            let b = pool_rubin(&qs, &us, 0.95).unwrap();
            prop_assert!((b.qbar - c * a.qbar).abs() <= 1e-12 * (1.0 + a.qbar.abs() * c.abs()));
            prop_assert!((b.se - c.abs() * a.se).abs() <= 1e-12 * (1.0 + a.se * c.abs()));
            prop_assert!((b.riv - a.riv).abs() <= 1e-9 * (1.0 + a.riv));
            prop_assert!((b.fmi - a.fmi).abs() <= 1e-9);
        }
    }
}
