//! Declarative run configuration, read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bart::BartParams;
use crate::causal::{Binning, TreatmentMode, TreatmentSpec, LEAP_PRESET};
use crate::dataset::{ColumnKind, Role, TableSchema};
use crate::error::{Error, Result};
use crate::forest::ForestParams;
use crate::mice::MiceParams;
use crate::support::SupportRule;
use crate::synth::{DgpSpec, Mechanism};

/// Where the analysis data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// A delimited file; relative paths resolve against the config file.
    File {
        path: PathBuf,
        #[serde(flatten)]
        schema: TableSchema,
    },
    /// A synthetic process; its seed is derived from the master seed.
    Simulate {
        #[serde(flatten)]
        spec: DgpSpec,
        /// Optional deletion applied after generation.
        #[serde(default)]
        missingness: Option<MissingSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingSpec {
    pub column: String,
    pub rate: f64,
    #[serde(flatten)]
    pub mechanism: Mechanism,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateSpec {
    pub moderator: String,
    #[serde(default = "auto_binning")]
    pub binning: Binning,
}

fn auto_binning() -> Binning {
    Binning::Auto
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EffectsConfig {
    /// Dose pairs for leap contrasts, continuous mode only.
    pub leaps: Vec<(f64, f64)>,
    /// Subgroup analyses, binary mode only.
    pub cate: Vec<CateSpec>,
    /// Also report the ATE over units kept under this rule.
    pub supported_ate: Option<SupportRule>,
}

impl Default for EffectsConfig {
    fn default() -> Self {
        Self {
            leaps: LEAP_PRESET.to_vec(),
            cate: Vec::new(),
            supported_ate: None,
        }
    }
}

fn default_rules() -> Vec<SupportRule> {
    vec![SupportRule::Relaxed, SupportRule::Conservative]
}

fn default_level() -> f64 {
    0.95
}

fn default_m() -> usize {
    20
}

fn default_propensity() -> ForestParams {
    ForestParams {
        n_trees: 200,
        ..Default::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Master seed; every stream in the run derives from it.
    pub seed: Option<u64>,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    pub data: DataSource,
    pub treatment: TreatmentSpec,
    #[serde(default)]
    pub mice: MiceSettings,
    #[serde(default)]
    pub bart: BartParams,
    #[serde(default = "default_propensity")]
    pub propensity: ForestParams,
    #[serde(default)]
    pub effects: EffectsConfig,
    #[serde(default = "default_rules")]
    pub support: Vec<SupportRule>,
}

/// Imputation settings; the number of imputations is the top-level `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiceSettings {
    pub n_iter: usize,
    pub forest: ForestParams,
}

impl Default for MiceSettings {
    fn default() -> Self {
        let p = MiceParams::default();
        Self {
            n_iter: p.n_iter,
            forest: p.forest,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Reads a config file and resolves a relative data path against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            e => e,
        })?;
        if let DataSource::File { path: p, .. } = &mut cfg.data {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn master_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::config("a master seed is required (config `seed` or --seed)"))
    }

    pub fn mice_params(&self) -> MiceParams {
        MiceParams {
            m: self.m,
            n_iter: self.mice.n_iter,
            forest: self.mice.forest.clone(),
        }
    }

    /// Declared columns as (name, kind, role).
    pub fn columns(&self) -> Vec<(String, ColumnKind, Role)> {
        match &self.data {
            DataSource::File { schema, .. } => schema
                .columns
                .iter()
                .map(|c| (c.name.clone(), c.kind, c.role))
                .collect(),
            DataSource::Simulate { spec, .. } => {
                let mut cols: Vec<_> = (1..=spec.n_covariates)
                    .map(|j| (format!("x{j}"), ColumnKind::Continuous, Role::Covariate))
                    .collect();
                if spec.is_dose() {
                    cols.push(("dose".into(), ColumnKind::Count, Role::Treatment));
                } else {
                    cols.push(("z".into(), ColumnKind::Binary, Role::Treatment));
                }
                cols.push(("y".into(), ColumnKind::Continuous, Role::Outcome));
                cols
            }
        }
    }

    /// Checks everything that can be checked before any data is touched.
    pub fn validate(&self) -> Result<()> {
        self.master_seed()?;
        if self.m < 2 {
            return Err(Error::config(format!("m must be >= 2, got {}", self.m)));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::config(format!("level {} outside (0, 1)", self.level)));
        }
        self.bart.validate()?;
        self.treatment.validate()?;
        if self.support.is_empty() {
            return Err(Error::config("at least one support rule is required"));
        }
        if let DataSource::Simulate { spec, missingness } = &self.data {
            spec.validate()?;
            if let Some(ms) = missingness {
                if !(0.0..1.0).contains(&ms.rate) {
                    return Err(Error::config(format!("missingness rate {} outside [0, 1)", ms.rate)));
                }
            }
        }
        let cols = self.columns();
        let find = |name: &str| cols.iter().find(|c| c.0 == name);
        let (_, kind, role) = find(&self.treatment.column).ok_or_else(|| {
            Error::config(format!("treatment column `{}` is not declared", self.treatment.column))
        })?;
        if *role != Role::Treatment {
            return Err(Error::config(format!("`{}` is not the treatment column", self.treatment.column)));
        }
        if self.treatment.mode == TreatmentMode::Continuous && *kind == ColumnKind::Binary {
            return Err(Error::config("continuous mode needs a non-binary treatment"));
        }
        if !cols.iter().any(|c| c.2 == Role::Outcome) {
            return Err(Error::config("no outcome column declared"));
        }
        for c in &self.effects.cate {
            if find(&c.moderator).is_none() {
                return Err(Error::config(format!("moderator `{}` is not declared", c.moderator)));
            }
        }
        if let DataSource::Simulate { missingness: Some(ms), .. } = &self.data {
            if find(&ms.column).is_none() {
                return Err(Error::config(format!("missingness column `{}` is not generated", ms.column)));
            }
        }
        for &(a0, a1) in &self.effects.leaps {
            if !(a0.is_finite() && a1.is_finite()) {
                return Err(Error::config("leap doses must be finite"));
            }
        }
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.treatment.mode == TreatmentMode::BinaryMedian
    }
}

/// A ready-to-edit configuration, also shipped as the canonical example.
pub fn example_config() -> RunConfig {
    RunConfig {
        seed: Some(20240601),
        m: 5,
        level: 0.95,
        data: DataSource::Simulate {
            spec: DgpSpec::default(),
            missingness: None,
        },
        treatment: TreatmentSpec::new("z", TreatmentMode::BinaryMedian),
        mice: MiceSettings::default(),
        bart: BartParams::default(),
        propensity: default_propensity(),
        effects: EffectsConfig::default(),
        support: default_rules(),
    }
}
