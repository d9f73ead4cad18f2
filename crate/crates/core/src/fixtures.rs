//! Golden-value fixtures: published numbers, exact identities and
//! simulation oracles, each checked against a run of this crate.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::causal::leap_label;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::run_pipeline;
use crate::pooling::fmi_from_riv;

/// Where an expected value comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Printed in a published results table.
    Published,
    /// Follows from an algebraic identity.
    Identity,
    /// Computed from the generating process of a simulation.
    Oracle,
}

/// One manifest entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub name: String,
    pub command: Command,
    /// Expected-values file, relative to the manifest.
    pub expected: PathBuf,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Recompute fmi from riv with classical df and compare.
    FmiFromRiv,
    /// Run a dose config and check leap additivity per draw.
    LeapTelescoping,
    /// Run a dose config and check pooled-curve coverage of the oracle.
    AdrfCoverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RivRow {
    pub label: String,
    pub riv: f64,
    pub fmi: f64,
}

/// Contents of an expected-values file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expected {
    pub provenance: Provenance,
    /// Run configuration, relative to the expected-values file.
    #[serde(default)]
    pub config: Option<PathBuf>,
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub rows: Vec<RivRow>,
    /// Dose chain `a < b < c` for telescoping.
    #[serde(default)]
    pub chain: Option<[f64; 3]>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Seeds that must pass, out of `seeds`.
    #[serde(default)]
    pub min_passing: usize,
    /// Grid points whose oracle must fall inside the pooled interval.
    #[serde(default)]
    pub min_covered: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub label: String,
    pub expected: f64,
    pub actual: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureOutcome {
    pub name: String,
    pub passed: bool,
    pub deltas: Vec<Delta>,
}

impl FixtureOutcome {
    pub fn failures(&self) -> Vec<&Delta> {
        self.deltas.iter().filter(|d| !d.ok).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    fixture: Vec<Fixture>,
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

/// Loads a manifest and resolves each expected path against it.
pub fn load_manifest(path: &Path) -> Result<Vec<Fixture>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let m: Manifest = read_toml(path)?;
    Ok(m.fixture
        .into_iter()
        .map(|mut f| {
            f.expected = base.join(&f.expected);
            f
        })
        .collect())
}

fn seeded_config(exp: &Expected, expected_path: &Path, seed: u64) -> Result<RunConfig> {
    let rel = exp
        .config
        .as_ref()
        .ok_or_else(|| Error::config("fixture needs a `config`"))?;
    let path = expected_path.parent().unwrap_or(Path::new(".")).join(rel);
    let mut cfg = RunConfig::load(&path)?;
    cfg.seed = Some(seed);
    Ok(cfg)
}

fn fmi_rows(exp: &Expected, tol: f64) -> Result<Vec<Delta>> {
    let m = exp.m.ok_or_else(|| Error::config("fmi fixture needs `m`"))?;
    Ok(exp
        .rows
        .iter()
        .map(|r| {
            let actual = fmi_from_riv(r.riv, m);
            Delta {
                label: r.label.clone(),
                expected: r.fmi,
                actual,
                ok: (actual - r.fmi).abs() <= tol,
            }
        })
        .collect())
}

fn telescoping(f: &Fixture, exp: &Expected) -> Result<Vec<Delta>> {
    let [a, b, c] = exp.chain.ok_or_else(|| Error::config("telescoping fixture needs `chain`"))?;
    let labels = [leap_label(a, b), leap_label(b, c), leap_label(a, c)];
    let mut deltas = Vec::new();
    for &seed in &exp.seeds {
        let out = run_pipeline(&seeded_config(exp, &f.expected, seed)?)?;
        for an in &out.analyses {
            let get = |l: &str| {
                an.effects
                    .iter()
                    .find(|e| e.estimand == l)
                    .ok_or_else(|| Error::config(format!("config does not request `{l}`")))
            };
            let (ab, bc, ac) = (get(&labels[0])?, get(&labels[1])?, get(&labels[2])?);
            let worst = (0..ac.draws.len())
                .map(|t| (ab.draws[t] + bc.draws[t] - ac.draws[t]).abs())
                .fold(0.0, f64::max);
            deltas.push(Delta {
                label: format!("seed {seed} imputation {}", an.imputation),
                expected: 0.0,
                actual: worst,
                ok: worst <= f.tolerance,
            });
        }
    }
    Ok(deltas)
}

fn coverage(f: &Fixture, exp: &Expected) -> Result<Vec<Delta>> {
    let mut deltas = Vec::new();
    for &seed in &exp.seeds {
        let out = run_pipeline(&seeded_config(exp, &f.expected, seed)?)?;
        let sim = out
            .truth
            .as_ref()
            .ok_or_else(|| Error::config("coverage fixture needs a simulated source"))?;
        let curve = out
            .report
            .curves
            .first()
            .ok_or_else(|| Error::config("coverage fixture needs a dose-response curve"))?;
        let grid: Vec<f64> = curve.points.iter().map(|p| p.dose).collect();
        let truth = sim.sample_adrf(&grid);
        let covered = curve
            .points
            .iter()
            .zip(&truth)
            .filter(|(p, &t)| p.ci_low - f.tolerance <= t && t <= p.ci_high + f.tolerance)
            .count();
        deltas.push(Delta {
            label: format!("seed {seed} points covered"),
            expected: exp.min_covered as f64,
            actual: covered as f64,
            ok: covered >= exp.min_covered,
        });
    }
    Ok(deltas)
}

pub fn check_fixture(f: &Fixture) -> Result<FixtureOutcome> {
    let exp: Expected = read_toml(&f.expected)?;
    let (deltas, passed) = match f.command {
        Command::FmiFromRiv => {
            let d = fmi_rows(&exp, f.tolerance)?;
            let ok = d.iter().all(|d| d.ok);
            (d, ok)
        }
        Command::LeapTelescoping => {
            let d = telescoping(f, &exp)?;
            let ok = d.iter().all(|d| d.ok);
            (d, ok)
        }
        Command::AdrfCoverage => {
            let d = coverage(f, &exp)?;
            let ok = d.iter().filter(|d| d.ok).count() >= exp.min_passing;
            (d, ok)
        }
    };
    Ok(FixtureOutcome {
        name: f.name.clone(),
        passed: passed && !deltas.is_empty(),
        deltas,
    })
}
