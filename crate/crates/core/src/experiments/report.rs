//! Tagged result tables and their on-disk form.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::fmt_f64;
use crate::svg::{line_plot, Plot};

use super::ExperimentError;

/// Grid coordinate of a row.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum GridValue {
    Int(i64),
    Num(f64),
    Text(String),
}

impl GridValue {
    fn cell(&self) -> String {
        match self {
            Self::Int(i) => i.to_string(),
            Self::Num(v) => fmt_f64(*v),
            Self::Text(s) => s.clone(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Self::Int(i) => Some(*i as f64),
            Self::Num(v) => Some(*v),
            Self::Text(_) => None,
        }
    }

    fn key(&self) -> String {
        match self {
            Self::Num(v) => format!("{:016x}", v.to_bits()),
            other => other.cell(),
        }
    }
}

impl From<f64> for GridValue {
    fn from(v: f64) -> Self {
        Self::Num(v)
    }
}

impl From<usize> for GridValue {
    fn from(v: usize) -> Self {
        Self::Int(v as i64)
    }
}

impl From<&str> for GridValue {
    fn from(v: &str) -> Self {
        Self::Text(v.to_owned())
    }
}

impl From<String> for GridValue {
    fn from(v: String) -> Self {
        Self::Text(v)
    }
}

/// One metric row. `seed == None` marks an aggregate over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub objective: String,
    pub seed: Option<u64>,
    pub grid: Vec<GridValue>,
    pub metrics: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub axes: Vec<String>,
    pub metrics: Vec<String>,
    pub rows: Vec<Row>,
}

impl Table {
    pub fn new(name: &str, axes: &[&str], metrics: &[&str]) -> Self {
        Self {
            name: name.into(),
            axes: axes.iter().map(|s| s.to_string()).collect(),
            metrics: metrics.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, objective: &str, seed: Option<u64>, grid: Vec<GridValue>, metrics: Vec<f64>) {
        assert_eq!(grid.len(), self.axes.len(), "grid arity of table `{}`", self.name);
        assert_eq!(metrics.len(), self.metrics.len(), "metric arity of table `{}`", self.name);
        self.rows.push(Row { objective: objective.into(), seed, grid, metrics });
    }

    pub fn axis_index(&self, axis: &str) -> Option<usize> {
        self.axes.iter().position(|a| a == axis)
    }

    pub fn metric_index(&self, metric: &str) -> Option<usize> {
        self.metrics.iter().position(|m| m == metric)
    }

    /// Rows of `objective` whose grid matches every `(axis, value)` filter.
    pub fn select<'a>(&'a self, objective: &'a str, filter: &'a [(&str, GridValue)]) -> impl Iterator<Item = &'a Row> + 'a {
        let idx: Vec<(usize, &GridValue)> = filter
            .iter()
            .map(|(a, v)| (self.axis_index(a).unwrap_or_else(|| panic!("no axis `{a}`")), v))
            .collect();
        self.rows
            .iter()
            .filter(move |r| r.objective == objective && idx.iter().all(|(i, v)| r.grid[*i].key() == v.key()))
    }

    /// Values of `metric` over the selected rows, in row order.
    pub fn values(&self, objective: &str, filter: &[(&str, GridValue)], metric: &str) -> Vec<f64> {
        let m = self.metric_index(metric).unwrap_or_else(|| panic!("no metric `{metric}`"));
        self.select(objective, filter).map(|r| r.metrics[m]).collect()
    }

    /// Per-seed rows collapsed to their median over seeds, one row per
    /// (objective, grid point), in first-appearance order.
    pub fn median_over_seeds(&self, name: &str) -> Table {
        let mut groups: Vec<((String, Vec<GridValue>), Vec<&Row>)> = Vec::new();
        let mut index: BTreeMap<(String, Vec<String>), usize> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.seed.is_some()) {
            let key = (r.objective.clone(), r.grid.iter().map(GridValue::key).collect());
            let slot = *index.entry(key).or_insert_with(|| {
                groups.push(((r.objective.clone(), r.grid.clone()), Vec::new()));
                groups.len() - 1
            });
            groups[slot].1.push(r);
        }
        let mut out = Table { name: name.into(), axes: self.axes.clone(), metrics: self.metrics.clone(), rows: Vec::new() };
        for ((objective, grid), rows) in groups {
            let metrics = (0..self.metrics.len())
                .map(|m| median(&rows.iter().map(|r| r.metrics[m]).collect::<Vec<_>>()))
                .collect();
            out.rows.push(Row { objective, seed: None, grid, metrics });
        }
        out
    }

    /// RFC 4180 CSV: `objective, seed, <axes…>, <metrics…>`.
    pub fn to_csv(&self) -> Result<String, ExperimentError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["objective".to_string(), "seed".to_string()];
        header.extend(self.axes.iter().cloned());
        header.extend(self.metrics.iter().cloned());
        w.write_record(&header).map_err(io_csv)?;
        for r in &self.rows {
            let mut rec = vec![r.objective.clone(), r.seed.map_or_else(|| "median".into(), |s| s.to_string())];
            rec.extend(r.grid.iter().map(GridValue::cell));
            rec.extend(r.metrics.iter().map(|v| fmt_f64(*v)));
            w.write_record(&rec).map_err(io_csv)?;
        }
        let bytes = w.into_inner().map_err(|e| ExperimentError::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

fn io_csv(e: csv::Error) -> ExperimentError {
    ExperimentError::Io(e.to_string())
}

/// Median with the mean-of-middle convention; NaN for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Results of one preset. The first table is the main `report`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seeds: Vec<u64>,
    /// Preset parameters, recorded in the manifest.
    pub preset: toml::Table,
    pub tables: Vec<Table>,
    pub plots: Vec<Plot>,
}

impl ExperimentReport {
    pub fn new(experiment: &str, seeds: &[u64], preset: &impl Serialize) -> Self {
        let preset = match toml::Value::try_from(preset) {
            Ok(toml::Value::Table(t)) => t,
            _ => toml::Table::new(),
        };
        Self { experiment: experiment.into(), seeds: seeds.to_vec(), preset, tables: Vec::new(), plots: Vec::new() }
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn main(&self) -> &Table {
        &self.tables[0]
    }

    pub fn manifest(&self) -> String {
        let mut m = toml::Table::new();
        m.insert("experiment".into(), self.experiment.clone().into());
        m.insert("code_version".into(), env!("CARGO_PKG_VERSION").into());
        m.insert(
            "seeds".into(),
            toml::Value::Array(self.seeds.iter().map(|s| toml::Value::Integer(*s as i64)).collect()),
        );
        m.insert(
            "tables".into(),
            toml::Value::Array(self.tables.iter().map(|t| format!("{}.csv", t.name).into()).collect()),
        );
        m.insert("preset".into(), toml::Value::Table(self.preset.clone()));
        toml::to_string(&m).expect("manifest is serializable")
    }

    /// Writes `<out>/<experiment>/{<table>.csv…, manifest.toml}` and, when
    /// `svg` is set, one `.svg` per plot. Returns the experiment directory.
    pub fn write_to(&self, out: &Path, svg: bool) -> Result<PathBuf, ExperimentError> {
        let dir = out.join(&self.experiment);
        fs::create_dir_all(&dir).map_err(|e| ExperimentError::Io(format!("{}: {e}", dir.display())))?;
        let write = |name: String, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| ExperimentError::Io(format!("{}: {e}", p.display())))
        };
        for t in &self.tables {
            write(format!("{}.csv", t.name), t.to_csv()?)?;
        }
        write("manifest.toml".into(), self.manifest())?;
        if svg {
            for p in &self.plots {
                write(format!("{}.svg", p.name), line_plot(p))?;
            }
        }
        Ok(dir)
    }
}
