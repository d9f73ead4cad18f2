//! Numeric design matrices built from dataset columns.

use ndarray::{Array2, Axis};

use crate::dataset::{ColumnKind, Dataset};
use crate::error::{Error, Result};

/// Row-major feature matrix with named columns. Categorical columns are
/// expanded to one indicator per level, named `column=level`.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub names: Vec<String>,
    pub x: Array2<f64>,
}

impl Design {
    pub fn new(names: Vec<String>, x: Array2<f64>) -> Result<Self> {
        if names.len() != x.ncols() {
            return Err(Error::schema(format!(
                "{} names for {} feature columns",
                names.len(),
                x.ncols()
            )));
        }
        Ok(Self { names, x })
    }

    /// Build from named dataset columns. Fails if any selected cell is missing.
    pub fn from_dataset(d: &Dataset, columns: &[String]) -> Result<Self> {
        Self::build(d, columns, true)
    }

    /// Build using the stored cell values regardless of the mask. Used by the
    /// imputation loop, which keeps working values in masked cells.
    pub fn from_dataset_unmasked(d: &Dataset, columns: &[String]) -> Result<Self> {
        Self::build(d, columns, false)
    }

    fn build(d: &Dataset, columns: &[String], strict: bool) -> Result<Self> {
        let n = d.n();
        let mut names = Vec::new();
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for name in columns {
            let c = d.require(name)?;
            if strict && c.mask.iter().any(|&m| m) {
                return Err(Error::data(format!(
                    "column `{name}` has missing cells; impute before modelling"
                )));
            }
            if c.kind == ColumnKind::Categorical {
                for (k, level) in c.levels.iter().enumerate() {
                    names.push(format!("{name}={level}"));
                    cols.push(c.values.iter().map(|&v| (v as usize == k) as u8 as f64).collect());
                }
            } else {
                names.push(name.clone());
                cols.push(c.values.clone());
            }
        }
        let mut x = Array2::zeros((n, cols.len()));
        for (j, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                x[[i, j]] = v;
            }
        }
        Ok(Self { names, x })
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::schema(format!("design has no feature `{name}`")))
    }

    pub fn with_column(&self, name: &str, values: &[f64]) -> Result<Design> {
        if values.len() != self.n_rows() {
            return Err(Error::schema(format!(
                "feature `{name}` has {} values for {} rows",
                values.len(),
                self.n_rows()
            )));
        }
        let mut x = Array2::zeros((self.n_rows(), self.n_features() + 1));
        x.slice_mut(ndarray::s![.., ..self.n_features()])
            .assign(&self.x);
        for (i, &v) in values.iter().enumerate() {
            x[[i, self.n_features()]] = v;
        }
        let mut names = self.names.clone();
        names.push(name.to_string());
        Ok(Design { names, x })
    }

    /// Copy with feature `col` set to `value` in every row.
    pub fn with_constant(&self, col: usize, value: f64) -> Design {
        let mut out = self.clone();
        out.x.column_mut(col).fill(value);
        out
    }

    pub fn with_values(&self, col: usize, values: &[f64]) -> Design {
        let mut out = self.clone();
        for (i, &v) in values.iter().enumerate() {
            out.x[[i, col]] = v;
        }
        out
    }

    pub fn select_rows(&self, rows: &[usize]) -> Design {
        Design {
            names: self.names.clone(),
            x: self.x.select(Axis(0), rows),
        }
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.x.column(j).to_vec()
    }
}
