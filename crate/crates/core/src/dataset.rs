//! Typed rectangular tables with an explicit per-cell missingness mask.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Tokens that mark a cell as missing. Matching is case-sensitive.
pub const MISSING_TOKENS: [&str; 2] = ["", "NA"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Count,
    Binary,
    Categorical,
}

impl ColumnKind {
    pub fn is_discrete_class(self) -> bool {
        matches!(self, ColumnKind::Binary | ColumnKind::Categorical)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Outcome,
    Treatment,
    Covariate,
    Id,
}

/// One declared column of an input table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default = "default_role")]
    pub role: Role,
}

fn default_role() -> Role {
    Role::Covariate
}

/// Role and kind declarations for a table. Header columns that are not
/// declared here are ignored on load.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TableSchema {
    pub columns: Vec<ColumnSpec>,
}

impl TableSchema {
    pub fn new(columns: Vec<ColumnSpec>) -> Self {
        Self { columns }
    }

    pub fn column(mut self, name: &str, kind: ColumnKind, role: Role) -> Self {
        self.columns.push(ColumnSpec {
            name: name.to_string(),
            kind,
            role,
        });
        self
    }

    fn roles(&self) -> Result<Roles> {
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::schema(format!("column `{}` declared twice", c.name)));
            }
        }
        let by_role = |r: Role| -> Vec<String> {
            self.columns
                .iter()
                .filter(|c| c.role == r)
                .map(|c| c.name.clone())
                .collect()
        };
        let treatments = by_role(Role::Treatment);
        if treatments.len() != 1 {
            return Err(Error::schema(format!(
                "exactly one treatment column required, found {}",
                treatments.len()
            )));
        }
        let ids = by_role(Role::Id);
        if ids.len() > 1 {
            return Err(Error::schema("at most one id column allowed"));
        }
        Ok(Roles {
            outcomes: by_role(Role::Outcome),
            treatment: treatments[0].clone(),
            covariates: by_role(Role::Covariate),
            id: ids.into_iter().next(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roles {
    pub outcomes: Vec<String>,
    pub treatment: String,
    pub covariates: Vec<String>,
    pub id: Option<String>,
}

/// A single typed column. Categorical cells hold level codes indexing
/// `levels`; masked cells hold a 0.0 placeholder.
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub levels: Vec<String>,
}

impl Column {
    pub fn continuous(name: &str, values: Vec<f64>) -> Self {
        Self::numeric(name, ColumnKind::Continuous, values)
    }

    pub fn numeric(name: &str, kind: ColumnKind, values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            name: name.to_string(),
            kind,
            values,
            mask: vec![false; n],
            levels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_missing(&self, row: usize) -> bool {
        self.mask[row]
    }

    pub fn missing_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn observed(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| !m)
            .map(|(&v, _)| v)
            .collect()
    }

    pub fn observed_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.mask[i]).collect()
    }

    pub fn missing_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.mask[i]).collect()
    }

    /// Number of classes for a binary or categorical column.
    pub fn n_classes(&self) -> usize {
        match self.kind {
            ColumnKind::Binary => 2,
            ColumnKind::Categorical => self.levels.len(),
            _ => 0,
        }
    }

    fn format_cell(&self, row: usize) -> String {
        if self.mask[row] {
            return "NA".to_string();
        }
        let v = self.values[row];
        match self.kind {
            ColumnKind::Continuous => format!("{v}"),
            ColumnKind::Count | ColumnKind::Binary => format!("{}", v as i64),
            ColumnKind::Categorical => self.levels[v as usize].clone(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.values.len() != self.mask.len() {
            return Err(Error::data(format!(
                "column `{}`: values and mask lengths differ",
                self.name
            )));
        }
        for (i, (&v, &m)) in self.values.iter().zip(&self.mask).enumerate() {
            if m {
                continue;
            }
            let ok = match self.kind {
                ColumnKind::Continuous => v.is_finite(),
                ColumnKind::Count => v.is_finite() && v >= 0.0 && v.fract() == 0.0,
                ColumnKind::Binary => v == 0.0 || v == 1.0,
                ColumnKind::Categorical => {
                    v.fract() == 0.0 && v >= 0.0 && (v as usize) < self.levels.len()
                }
            };
            if !ok {
                return Err(Error::data(format!(
                    "column `{}` row {}: value {} invalid for kind {:?}",
                    self.name, i, v, self.kind
                )));
            }
        }
        Ok(())
    }
}

/// Rectangular table: equal-length columns plus role assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub columns: Vec<Column>,
    pub roles: Roles,
}

impl Dataset {
    pub fn new(columns: Vec<Column>, roles: Roles) -> Result<Self> {
        let d = Self { columns, roles };
        d.validate()?;
        Ok(d)
    }

    pub fn n(&self) -> usize {
        self.columns.first().map_or(0, Column::len)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let mut names = HashSet::new();
        for c in &self.columns {
            if c.len() != n {
                return Err(Error::data(format!(
                    "column `{}` has {} rows, expected {}",
                    c.name,
                    c.len(),
                    n
                )));
            }
            if !names.insert(c.name.as_str()) {
                return Err(Error::schema(format!("duplicate column `{}`", c.name)));
            }
            c.check()?;
        }
        let r = &self.roles;
        for name in r
            .outcomes
            .iter()
            .chain(&r.covariates)
            .chain(std::iter::once(&r.treatment))
            .chain(r.id.iter())
        {
            if !names.contains(name.as_str()) {
                return Err(Error::schema(format!(
                    "role references absent column `{name}`"
                )));
            }
        }
        if let Some(id) = &r.id {
            let col = self.column(id).expect("checked above");
            let mut seen = HashSet::new();
            for v in col.observed() {
                if !seen.insert(v.to_bits()) {
                    return Err(Error::data(format!("id column `{id}` has duplicate values")));
                }
            }
        }
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn column_mut(&mut self, name: &str) -> Option<&mut Column> {
        self.columns.iter_mut().find(|c| c.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Column> {
        self.column(name)
            .ok_or_else(|| Error::schema(format!("no column named `{name}`")))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn treatment(&self) -> &Column {
        self.column(&self.roles.treatment)
            .expect("validated dataset has its treatment column")
    }

    pub fn role_of(&self, name: &str) -> Option<Role> {
        let r = &self.roles;
        if r.treatment == name {
            Some(Role::Treatment)
        } else if r.outcomes.iter().any(|o| o == name) {
            Some(Role::Outcome)
        } else if r.id.as_deref() == Some(name) {
            Some(Role::Id)
        } else if r.covariates.iter().any(|c| c == name) {
            Some(Role::Covariate)
        } else {
            None
        }
    }

    /// The schema that reproduces this dataset when its CSV form is reloaded.
    pub fn schema(&self) -> TableSchema {
        TableSchema::new(
            self.columns
                .iter()
                .map(|c| ColumnSpec {
                    name: c.name.clone(),
                    kind: c.kind,
                    role: self.role_of(&c.name).unwrap_or(Role::Covariate),
                })
                .collect(),
        )
    }

    pub fn has_missing(&self) -> bool {
        self.columns.iter().any(|c| c.mask.iter().any(|&m| m))
    }

    /// Copy with the rows selected by `rows`, in that order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let columns = self
            .columns
            .iter()
            .map(|c| Column {
                name: c.name.clone(),
                kind: c.kind,
                values: rows.iter().map(|&i| c.values[i]).collect(),
                mask: rows.iter().map(|&i| c.mask[i]).collect(),
                levels: c.levels.clone(),
            })
            .collect();
        Dataset {
            columns,
            roles: self.roles.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::data(format!("csv write: {e}"));
        wr.write_record(self.columns.iter().map(|c| c.name.as_str()))
            .map_err(csv_err)?;
        for i in 0..self.n() {
            wr.write_record(self.columns.iter().map(|c| c.format_cell(i)))
                .map_err(csv_err)?;
        }
        wr.flush().map_err(|e| Error::data(format!("csv write: {e}")))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

/// Load a comma-separated file with a header row.
pub fn load_table(path: &Path, schema: &TableSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_table(file, schema)
}

pub fn parse_table<R: Read>(reader: R, schema: &TableSchema) -> Result<Dataset> {
    let roles = schema.roles()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::data(format!("reading header: {e}")))?
        .clone();
    let mut positions = Vec::with_capacity(schema.columns.len());
    for spec in &schema.columns {
        let pos = header.iter().position(|h| h == spec.name).ok_or_else(|| {
            Error::schema(format!("declared column `{}` not in file header", spec.name))
        })?;
        positions.push(pos);
    }

    let mut raw: Vec<Vec<Option<String>>> = vec![Vec::new(); schema.columns.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(format!("row {}: {e}", row + 1)))?;
        for (j, &pos) in positions.iter().enumerate() {
            let cell = rec.get(pos).unwrap_or("");
            raw[j].push(if MISSING_TOKENS.contains(&cell) {
                None
            } else {
                Some(cell.to_string())
            });
        }
    }

    let mut columns = Vec::with_capacity(raw.len());
    for (spec, cells) in schema.columns.iter().zip(raw) {
        columns.push(parse_column(spec, cells)?);
    }
    Dataset::new(columns, roles)
}

fn parse_column(spec: &ColumnSpec, cells: Vec<Option<String>>) -> Result<Column> {
    let n = cells.len();
    let mask: Vec<bool> = cells.iter().map(Option::is_none).collect();
    let bad = |row: usize, cell: &str| {
        Error::data(format!(
            "column `{}` row {}: cannot parse `{}` as {:?}",
            spec.name,
            row + 1,
            cell,
            spec.kind
        ))
    };
    let mut levels = Vec::new();
    let mut values = vec![0.0; n];
    match spec.kind {
        ColumnKind::Categorical => {
            let set: BTreeSet<&str> = cells.iter().flatten().map(String::as_str).collect();
            levels = set.iter().map(|s| s.to_string()).collect();
            let code: BTreeMap<&str, usize> =
                set.iter().enumerate().map(|(i, s)| (*s, i)).collect();
            for (i, c) in cells.iter().enumerate() {
                if let Some(c) = c {
                    values[i] = code[c.as_str()] as f64;
                }
            }
        }
        kind => {
            for (i, c) in cells.iter().enumerate() {
                let Some(c) = c else { continue };
                values[i] = match kind {
                    ColumnKind::Continuous => match c.trim().parse::<f64>() {
                        Ok(v) if v.is_finite() => v,
                        _ => return Err(bad(i, c)),
                    },
                    ColumnKind::Count => c.trim().parse::<u64>().map_err(|_| bad(i, c))? as f64,
                    ColumnKind::Binary => match c.trim() {
                        "0" => 0.0,
                        "1" => 1.0,
                        _ => return Err(bad(i, c)),
                    },
                    ColumnKind::Categorical => unreachable!(),
                };
            }
        }
    }
    Ok(Column {
        name: spec.name.clone(),
        kind: spec.kind,
        values,
        mask,
        levels,
    })
}

/// Descriptive statistics over observed cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveStats {
    pub min: f64,
    pub median: f64,
    pub mean: f64,
    pub sd: f64,
    pub max: f64,
    pub missing_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ColumnSummary {
    Numeric(DescriptiveStats),
    Categorical { levels: Vec<String>, counts: Vec<usize>, missing_rate: f64 },
    AllMissing,
}

pub fn summarize(d: &Dataset) -> Vec<(String, ColumnSummary)> {
    d.columns
        .iter()
        .map(|c| {
            let obs = c.observed();
            let missing_rate = c.missing_count() as f64 / c.len().max(1) as f64;
            let s = if obs.is_empty() {
                ColumnSummary::AllMissing
            } else if c.kind == ColumnKind::Categorical {
                let mut counts = vec![0; c.levels.len()];
                for v in &obs {
                    counts[*v as usize] += 1;
                }
                ColumnSummary::Categorical {
                    levels: c.levels.clone(),
                    counts,
                    missing_rate,
                }
            } else {
                let min = obs.iter().copied().fold(f64::INFINITY, f64::min);
                let max = obs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                ColumnSummary::Numeric(DescriptiveStats {
                    min,
                    median: stats::median(&obs),
                    mean: stats::sorted_mean(&obs),
                    sd: sorted_sd(&obs),
                    max,
                    missing_rate,
                })
            };
            (c.name.clone(), s)
        })
        .collect()
}

// Sorting first makes the summary independent of row order.
fn sorted_sd(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    stats::sd(&v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMissingness {
    pub name: String,
    pub missing: usize,
    pub observed: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMissingness {
    pub group: String,
    pub n: usize,
    pub missing: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeByTreatment {
    pub outcome: String,
    pub groups: Vec<GroupMissingness>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessProfile {
    pub columns: Vec<ColumnMissingness>,
    pub by_treatment: Vec<OutcomeByTreatment>,
}

/// Per-column missingness plus outcome non-response split by treatment
/// group. Continuous treatments are grouped by a strict-greater median
/// split; rows with a missing treatment form their own group.
pub fn missingness_profile(d: &Dataset) -> MissingnessProfile {
    let n = d.n();
    let columns = d
        .columns
        .iter()
        .map(|c| {
            let missing = c.missing_count();
            ColumnMissingness {
                name: c.name.clone(),
                missing,
                observed: n - missing,
                rate: if n == 0 { 0.0 } else { missing as f64 / n as f64 },
            }
        })
        .collect();

    let t = d.treatment();
    let obs = t.observed();
    let labels: Option<Vec<Option<&'static str>>> = if obs.is_empty() {
        None
    } else if t.kind == ColumnKind::Binary {
        Some(
            (0..n)
                .map(|i| (!t.mask[i]).then(|| if t.values[i] == 1.0 { "1" } else { "0" }))
                .collect(),
        )
    } else {
        let cut = stats::median(&obs);
        let any_high = obs.iter().any(|&v| v > cut);
        any_high.then(|| {
            (0..n)
                .map(|i| (!t.mask[i]).then(|| if t.values[i] > cut { "high" } else { "low" }))
                .collect()
        })
    };

    let mut by_treatment = Vec::new();
    if let Some(labels) = labels {
        for name in &d.roles.outcomes {
            let col = d.column(name).expect("validated");
            let mut groups: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
            for (i, l) in labels.iter().enumerate() {
                let e = groups.entry(l.unwrap_or("treatment_missing")).or_default();
                e.0 += 1;
                e.1 += col.mask[i] as usize;
            }
            by_treatment.push(OutcomeByTreatment {
                outcome: name.clone(),
                groups: groups
                    .into_iter()
                    .map(|(g, (n, missing))| GroupMissingness {
                        group: g.to_string(),
                        n,
                        missing,
                        rate: missing as f64 / n as f64,
                    })
                    .collect(),
            });
        }
    }
    MissingnessProfile {
        columns,
        by_treatment,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema2() -> TableSchema {
        TableSchema::default()
            .column("dose", ColumnKind::Count, Role::Treatment)
            .column("y", ColumnKind::Continuous, Role::Outcome)
    }

    #[test]
    fn empty_cell_is_masked() {
        let d = parse_table("dose,y\n0,1.5\n37,\n80,2.0\n".as_bytes(), &schema2()).unwrap();
        assert_eq!(d.n(), 3);
        let y = d.column("y").unwrap();
        assert_eq!(y.mask, vec![false, true, false]);
        assert_eq!(d.columns.iter().map(Column::missing_count).sum::<usize>(), 1);
    }

    #[test]
    fn na_token_is_case_sensitive() {
        let d = parse_table("dose,y\n0,NA\n1,2\n".as_bytes(), &schema2()).unwrap();
        assert!(d.column("y").unwrap().mask[0]);
        let err = parse_table("dose,y\n0,na\n1,2\n".as_bytes(), &schema2());
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn duplicate_treatment_role_rejected() {
        let schema = TableSchema::default()
            .column("a", ColumnKind::Count, Role::Treatment)
            .column("b", ColumnKind::Count, Role::Treatment);
        let err = parse_table("a,b\n1,2\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn absent_column_and_ragged_rows_rejected() {
        let schema = schema2().column("x", ColumnKind::Continuous, Role::Covariate);
        assert!(matches!(
            parse_table("dose,y\n1,2\n".as_bytes(), &schema),
            Err(Error::Schema(_))
        ));
        assert!(matches!(
            parse_table("dose,y\n1,2\n3\n".as_bytes(), &schema2()),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            parse_table("dose,y\n1.5,2\n".as_bytes(), &schema2()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn categorical_level_set() {
        let schema = schema2().column("g", ColumnKind::Categorical, Role::Covariate);
        let d = parse_table("dose,y,g\n1,1,a\n2,2,b\n3,3,a\n".as_bytes(), &schema).unwrap();
        let g = d.column("g").unwrap();
        assert_eq!(g.levels, vec!["a".to_string(), "b".to_string()]);
        assert_eq!(g.values, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let schema = schema2().column("id", ColumnKind::Categorical, Role::Id);
        let err = parse_table("dose,y,id\n1,1,a\n2,2,a\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn summary_of_attendance_like_column() {
        let d = parse_table("dose,y\n0,1\n37,1\n80,1\n".as_bytes(), &schema2()).unwrap();
        let s = summarize(&d);
        let ColumnSummary::Numeric(st) = &s[0].1 else { panic!() };
        assert_eq!((st.min, st.median, st.mean, st.max), (0.0, 37.0, 39.0, 80.0));
        assert!((st.sd - 1603f64.sqrt()).abs() < 1e-12);
        assert!((st.sd - 40.04).abs() < 0.005);
        let ColumnSummary::Numeric(sy) = &s[1].1 else { panic!() };
        assert_eq!((sy.mean, sy.sd), (1.0, 0.0));
    }

    #[test]
    fn all_missing_column_is_marked() {
        let d = parse_table("dose,y\n0,NA\n1,\n".as_bytes(), &schema2()).unwrap();
        assert_eq!(summarize(&d)[1].1, ColumnSummary::AllMissing);
        let p = missingness_profile(&d);
        assert_eq!(p.columns[1].rate, 1.0);
        assert_eq!(p.columns[1].missing, 2);
    }

    #[test]
    fn profile_rates_and_crosstab() {
        let mut csv = String::from("dose,y\n");
        for i in 0..1777 {
            let y = if i < 845 { "NA".to_string() } else { "1".to_string() };
            csv.push_str(&format!("{},{}\n", i % 81, y));
        }
        let d = parse_table(csv.as_bytes(), &schema2()).unwrap();
        let p = missingness_profile(&d);
        assert_eq!(p.columns[1].missing, 845);
        assert!((p.columns[1].rate - 0.4755).abs() < 5e-5);
        assert_eq!(p.columns[0].rate, 0.0);
        let groups = &p.by_treatment[0].groups;
        assert_eq!(groups.iter().map(|g| g.n).sum::<usize>(), 1777);
        assert_eq!(groups.iter().map(|g| g.missing).sum::<usize>(), 845);
    }
}
