//! Multiple imputation by chained equations with random-forest conditionals.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_table, ColumnKind, Dataset, TableSchema};
use crate::design::Design;
use crate::error::{Error, Result};
use crate::forest::{fit_forest, ForestParams, Response};
use crate::stats::{self, derive_seed, rng_for};

/// Absolute standardised mean difference above which a variable is flagged.
pub const SMD_FLAG: f64 = 0.25;
/// Convergence requires across-chain spread at most this fraction of the
/// within-chain spread.
pub const CONVERGENCE_RATIO: f64 = 0.1;
const CONVERGENCE_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiceParams {
    pub m: usize,
    pub n_iter: usize,
    pub forest: ForestParams,
}

impl Default for MiceParams {
    fn default() -> Self {
        Self {
            m: 20,
            n_iter: 10,
            forest: ForestParams {
                n_trees: 100,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub mean: f64,
    pub sd: f64,
}

/// M completed copies of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationStack {
    pub datasets: Vec<Dataset>,
    /// Missingness mask of the source, per column.
    pub source_mask: Vec<Vec<bool>>,
    pub n_iter: usize,
    /// `traces[c][variable]` holds one point per iteration of chain `c`.
    pub traces: Vec<BTreeMap<String, Vec<TracePoint>>>,
    pub seed: u64,
}

impl ImputationStack {
    pub fn m(&self) -> usize {
        self.datasets.len()
    }

    fn missing_rows(&self, variable: &str) -> Result<Vec<usize>> {
        let j = self.datasets[0]
            .index_of(variable)
            .ok_or_else(|| Error::schema(format!("no column named `{variable}`")))?;
        let rows: Vec<usize> = (0..self.source_mask[j].len())
            .filter(|&i| self.source_mask[j][i])
            .collect();
        if rows.is_empty() {
            return Err(Error::data(format!("`{variable}` was fully observed")));
        }
        Ok(rows)
    }
}

fn trace_point(values: &[f64], rows: &[usize]) -> TracePoint {
    let v: Vec<f64> = rows.iter().map(|&i| values[i]).collect();
    TracePoint {
        mean: stats::mean(&v),
        sd: stats::sd(&v),
    }
}

/// Columns with missing cells, most-missing first, ties by position.
fn visit_order(d: &Dataset) -> Vec<usize> {
    let mut order: Vec<usize> = (0..d.columns.len())
        .filter(|&j| d.columns[j].missing_count() > 0)
        .collect();
    order.sort_by(|&a, &b| {
        d.columns[b]
            .missing_count()
            .cmp(&d.columns[a].missing_count())
            .then(a.cmp(&b))
    });
    order
}

fn run_chain(
    d: &Dataset,
    order: &[usize],
    predictors: &[Vec<String>],
    p: &MiceParams,
    seed: u64,
    chain: usize,
) -> Result<(Dataset, BTreeMap<String, Vec<TracePoint>>)> {
    let mut rng = rng_for(seed, &[chain as u64]);
    let mut work = d.clone();
    for &j in order {
        let col = &mut work.columns[j];
        let observed = col.observed();
        for i in 0..col.len() {
            if col.mask[i] {
                col.values[i] = observed[rng.gen_range(0..observed.len())];
            }
        }
    }
    let mut trace: BTreeMap<String, Vec<TracePoint>> = BTreeMap::new();
    for it in 0..p.n_iter {
        for (k, &j) in order.iter().enumerate() {
            let x = Design::from_dataset_unmasked(&work, &predictors[k])?;
            let target = &work.columns[j];
            let obs = target.observed_rows();
            let mis = target.missing_rows();
            let x_obs = x.select_rows(&obs);
            let response = match target.kind {
                ColumnKind::Binary | ColumnKind::Categorical => Response::Classes {
                    labels: obs.iter().map(|&i| target.values[i] as usize).collect(),
                    n_classes: target.n_classes(),
                },
                ColumnKind::Continuous | ColumnKind::Count => {
                    Response::Regression(obs.iter().map(|&i| target.values[i]).collect())
                }
            };
            let fp = p
                .forest
                .clone()
                .with_seed(derive_seed(seed, &[chain as u64, it as u64, j as u64]));
            let forest = fit_forest(&x_obs.x, &response, &fp)?;
            let draws: Vec<f64> = mis.iter().map(|&i| forest.draw(x.x.row(i), &mut rng)).collect();
            let col = &mut work.columns[j];
            for (&i, v) in mis.iter().zip(draws) {
                col.values[i] = v;
            }
            trace
                .entry(col.name.clone())
                .or_default()
                .push(trace_point(&col.values, &mis));
        }
    }
    for c in &mut work.columns {
        c.mask.iter_mut().for_each(|m| *m = false);
    }
    Ok((work, trace))
}

pub fn impute_mice(d: &Dataset, p: &MiceParams, seed: u64) -> Result<ImputationStack> {
    if p.m < 2 {
        return Err(Error::config(format!("imputation needs m >= 2, got {}", p.m)));
    }
    for c in &d.columns {
        if c.missing_count() == c.len() {
            return Err(Error::data(format!("column `{}` has no observed cells", c.name)));
        }
    }
    if let Some(id) = &d.roles.id {
        if d.require(id)?.missing_count() > 0 {
            return Err(Error::data(format!("id column `{id}` has missing cells")));
        }
    }
    let source_mask: Vec<Vec<bool>> = d.columns.iter().map(|c| c.mask.clone()).collect();
    let order = visit_order(d);
    if order.is_empty() {
        let mut done = d.clone();
        for c in &mut done.columns {
            c.mask.iter_mut().for_each(|m| *m = false);
        }
        return Ok(ImputationStack {
            datasets: vec![done; p.m],
            source_mask,
            n_iter: p.n_iter,
            traces: vec![BTreeMap::new(); p.m],
            seed,
        });
    }
    if p.n_iter == 0 {
        return Err(Error::config("imputation needs n_iter >= 1"));
    }
    let predictors: Vec<Vec<String>> = order
        .iter()
        .map(|&j| {
            d.columns
                .iter()
                .enumerate()
                .filter(|(k, c)| *k != j && d.roles.id.as_deref() != Some(c.name.as_str()))
                .map(|(_, c)| c.name.clone())
                .collect()
        })
        .collect();
    let chains: Vec<(Dataset, BTreeMap<String, Vec<TracePoint>>)> = (0..p.m)
        .into_par_iter()
        .map(|c| run_chain(d, &order, &predictors, p, seed, c))
        .collect::<Result<_>>()?;
    let (datasets, traces) = chains.into_iter().unzip();
    Ok(ImputationStack {
        datasets,
        source_mask,
        n_iter: p.n_iter,
        traces,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub variable: String,
    /// One series per chain, one point per iteration.
    pub chains: Vec<Vec<TracePoint>>,
    /// `None` when fewer than three iterations were run.
    pub converged: Option<bool>,
}

pub fn chain_trace(stack: &ImputationStack, variable: &str) -> Result<ChainTrace> {
    stack.missing_rows(variable)?;
    let chains: Vec<Vec<TracePoint>> = stack
        .traces
        .iter()
        .map(|t| t.get(variable).cloned().unwrap_or_default())
        .collect();
    let converged = (stack.n_iter >= CONVERGENCE_WINDOW).then(|| {
        let tail = |s: &Vec<TracePoint>| s[s.len() - CONVERGENCE_WINDOW..].to_vec();
        let chain_means: Vec<f64> = chains
            .iter()
            .map(|s| stats::mean(&tail(s).iter().map(|p| p.mean).collect::<Vec<_>>()))
            .collect();
        let within_var: Vec<f64> = chains
            .iter()
            .flat_map(|s| tail(s).into_iter().map(|p| p.sd * p.sd))
            .collect();
        stats::sd(&chain_means) <= CONVERGENCE_RATIO * stats::mean(&within_var).sqrt()
    });
    Ok(ChainTrace {
        variable: variable.to_string(),
        chains,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `(mean_imputed - mean_observed) / sqrt((var_imputed + var_observed) / 2)`.
    pub smd: f64,
    pub variance_ratio: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationDiagnostics {
    pub variable: String,
    pub per_imputation: Vec<Comparison>,
    /// Averages of the per-imputation values.
    pub pooled: Comparison,
}

fn compare(imputed: &[f64], observed: &[f64]) -> Comparison {
    let (mi, mo) = (stats::mean(imputed), stats::mean(observed));
    let (vi, vo) = (stats::variance(imputed), stats::variance(observed));
    let pooled_sd = (0.5 * (vi + vo)).sqrt();
    let smd = if mi == mo {
        0.0
    } else {
        (mi - mo) / pooled_sd
    };
    Comparison {
        smd,
        variance_ratio: vi / vo,
        flagged: smd.abs() > SMD_FLAG,
    }
}

pub fn imputation_diagnostics(stack: &ImputationStack, variable: &str) -> Result<ImputationDiagnostics> {
    let mis = stack.missing_rows(variable)?;
    let j = stack.datasets[0].index_of(variable).expect("checked by missing_rows");
    let obs: Vec<usize> = (0..stack.source_mask[j].len())
        .filter(|&i| !stack.source_mask[j][i])
        .collect();
    let per_imputation: Vec<Comparison> = stack
        .datasets
        .iter()
        .map(|d| {
            let v = &d.columns[j].values;
            let imputed: Vec<f64> = mis.iter().map(|&i| v[i]).collect();
            let observed: Vec<f64> = obs.iter().map(|&i| v[i]).collect();
            compare(&imputed, &observed)
        })
        .collect();
    let smd = stats::mean(&per_imputation.iter().map(|c| c.smd).collect::<Vec<_>>());
    let variance_ratio = stats::mean(&per_imputation.iter().map(|c| c.variance_ratio).collect::<Vec<_>>());
    Ok(ImputationDiagnostics {
        variable: variable.to_string(),
        per_imputation,
        pooled: Comparison {
            smd,
            variance_ratio,
            flagged: smd.abs() > SMD_FLAG,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StackManifest {
    seed: u64,
    m: usize,
    n_iter: usize,
    files: Vec<String>,
    trace_file: String,
    schema: TableSchema,
    /// Source-missing row indices per column.
    missing: BTreeMap<String, Vec<usize>>,
}

const MANIFEST: &str = "manifest.json";
const TRACE: &str = "trace.csv";

/// Write `imputation_XXX.csv` files, `trace.csv` and `manifest.json`.
pub fn write_stack(stack: &ImputationStack, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (k, d) in stack.datasets.iter().enumerate() {
        let name = format!("imputation_{:03}.csv", k + 1);
        let path = dir.join(&name);
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        d.write_csv(std::io::BufWriter::new(f))?;
        files.push(name);
    }

    let path = dir.join(TRACE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::data(format!("writing trace: {e}"));
    w.write_record(["imputation", "variable", "iteration", "mean", "sd"])
        .map_err(csv_err)?;
    for (k, t) in stack.traces.iter().enumerate() {
        for (var, series) in t {
            for (it, p) in series.iter().enumerate() {
                w.write_record([
                    (k + 1).to_string(),
                    var.clone(),
                    (it + 1).to_string(),
                    p.mean.to_string(),
                    p.sd.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let d0 = &stack.datasets[0];
    let missing = d0
        .columns
        .iter()
        .zip(&stack.source_mask)
        .filter(|(_, m)| m.iter().any(|&b| b))
        .map(|(c, m)| (c.name.clone(), (0..m.len()).filter(|&i| m[i]).collect()))
        .collect();
    let manifest = StackManifest {
        seed: stack.seed,
        m: stack.m(),
        n_iter: stack.n_iter,
        files,
        trace_file: TRACE.into(),
        schema: d0.schema(),
        missing,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_stack(dir: &Path) -> Result<ImputationStack> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: StackManifest =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let datasets = manifest
        .files
        .iter()
        .map(|f| load_table(&dir.join(f), &manifest.schema))
        .collect::<Result<Vec<_>>>()?;
    let n = datasets.first().map_or(0, Dataset::n);
    let source_mask = manifest
        .schema
        .columns
        .iter()
        .map(|c| {
            let mut m = vec![false; n];
            for &i in manifest.missing.get(&c.name).map_or(&[][..], |v| v.as_slice()) {
                m[i] = true;
            }
            m
        })
        .collect();

    let path = dir.join(&manifest.trace_file);
    let mut traces = vec![BTreeMap::<String, Vec<TracePoint>>::new(); manifest.m];
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::data(format!("trace: {e}")))?;
        let num = |k: usize| -> Result<f64> {
            rec[k].parse().map_err(|_| Error::data(format!("trace: bad number `{}`", &rec[k])))
        };
        let k = num(0)? as usize;
        if k == 0 || k > manifest.m {
            return Err(Error::data("trace: imputation index out of range"));
        }
        traces[k - 1].entry(rec[1].to_string()).or_default().push(TracePoint {
            mean: num(3)?,
            sd: num(4)?,
        });
    }
    Ok(ImputationStack {
        datasets,
        source_mask,
        n_iter: manifest.n_iter,
        traces,
        seed: manifest.seed,
    })
}
