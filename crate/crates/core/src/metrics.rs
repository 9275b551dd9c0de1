//! Long-format metric rows shared by the experiment runner, the CV harness
//! and the pipeline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub experiment: String,
    pub rep: Option<usize>,
    pub method: String,
    #[serde(rename = "V")]
    pub v: Option<usize>,
    pub fold: Option<usize>,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(experiment: &str, method: &str, split: &str, metric: &str, value: f64) -> Self {
        Self {
            experiment: experiment.to_string(),
            rep: None,
            method: method.to_string(),
            v: None,
            fold: None,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        }
    }

    pub fn with_rep(mut self, rep: usize) -> Self {
        self.rep = Some(rep);
        self
    }

    pub fn with_fold(mut self, v: usize, fold: usize) -> Self {
        self.v = Some(v);
        self.fold = Some(fold);
        self
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, 0, format!("{other:?}")),
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut rows = Vec::new();
    for (idx, rec) in r.deserialize().enumerate() {
        rows.push(rec.map_err(|e: csv::Error| Error::parse(path, idx + 2, e.to_string()))?);
    }
    Ok(rows)
}

/// Values of `metric` for `method` in `experiment`, in row order.
pub fn select<'a>(rows: &'a [MetricRow], experiment: &'a str, method: &'a str, metric: &'a str) -> impl Iterator<Item = f64> + 'a {
    rows.iter()
        .filter(move |r| r.experiment == experiment && r.method == method && r.metric == metric)
        .map(|r| r.value)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}
