//! Longitudinal panels, regime encoding and the observation mask.
//!
//! Times are 1-based in the public API (`t = 1..=T`), matching the CSV
//! files; tensor indices are 0-based (`t - 1`).
//!
//! Regime bits are ordered earliest-first: for history length `k` the bit
//! vector is `(a_{t-k+1}, ..., a_t)` and `a_{t-k+1}` is the most significant
//! bit. So `(0,0,1,0,1)` encodes 5 and the current treatment is the parity
//! bit. Treatments at nonpositive times are taken to be 0.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tensor::Tensor3;

/// Integer index of a length-`k` treatment history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegimeCode {
    pub k: usize,
    pub l: usize,
}

impl RegimeCode {
    pub fn new(k: usize, l: usize) -> Result<Self> {
        if k == 0 || k > 30 {
            return Err(Error::argument(format!("history length k={k} must be in 1..=30")));
        }
        if l >= 1 << k {
            return Err(Error::argument(format!("regime {l} out of range for k={k}")));
        }
        Ok(Self { k, l })
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        Ok(Self { k: bits.len(), l: encode_regime(bits)? })
    }

    pub fn bits(&self) -> Vec<u8> {
        decode_regime(self.l, self.k).expect("validated on construction")
    }

    pub fn all_zeros(k: usize) -> Result<Self> {
        Self::new(k, 0)
    }

    pub fn all_ones(k: usize) -> Result<Self> {
        Self::new(k, (1usize << k) - 1)
    }

    pub fn n_regimes(&self) -> usize {
        1 << self.k
    }
}

/// `l = Σ_j bits[j]·2^{k−1−j}` (0-based `j`), earliest treatment first.
pub fn encode_regime(bits: &[u8]) -> Result<usize> {
    if bits.is_empty() {
        return Err(Error::argument("cannot encode an empty treatment history"));
    }
    if bits.len() > 30 {
        return Err(Error::argument("treatment histories longer than 30 are not supported"));
    }
    let mut l = 0usize;
    for &b in bits {
        if b > 1 {
            return Err(Error::argument(format!("treatment bit {b} is not binary")));
        }
        l = (l << 1) | b as usize;
    }
    Ok(l)
}

pub fn decode_regime(l: usize, k: usize) -> Result<Vec<u8>> {
    if k == 0 || k > 30 {
        return Err(Error::argument(format!("history length k={k} must be in 1..=30")));
    }
    if l >= 1 << k {
        return Err(Error::argument(format!("regime {l} out of range for k={k}")));
    }
    Ok((0..k).rev().map(|s| ((l >> s) & 1) as u8).collect())
}

/// How `(i, t)` cells with `t < k` enter the observation mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EarlyTimes {
    /// Missing treatments before `t = 1` count as 0.
    #[default]
    ZeroPad,
    /// Cells with an incomplete history are left out of Ω.
    Drop,
}

/// A complete balanced panel. Rows are subjects in id order.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    subject_ids: Vec<String>,
    x0: Matrix,
    x: Vec<Matrix>,
    a: Vec<Vec<u8>>,
    y: Matrix,
}

impl PanelDataset {
    /// `x[t]` is the `N × d` covariate matrix at time `t + 1`; `a[i][t]`,
    /// `y[(i, t)]` likewise.
    pub fn new(subject_ids: Vec<String>, x0: Matrix, x: Vec<Matrix>, a: Vec<Vec<u8>>, y: Matrix) -> Result<Self> {
        let n = subject_ids.len();
        if n == 0 {
            return Err(Error::argument("panel has no subjects"));
        }
        let t = y.cols();
        if t == 0 {
            return Err(Error::argument("panel has no time points"));
        }
        if x0.rows() != n || y.rows() != n || a.len() != n {
            return Err(Error::argument("baseline, treatment and outcome rows must match the subject count"));
        }
        if x.len() != t {
            return Err(Error::argument(format!("expected {t} covariate matrices, got {}", x.len())));
        }
        let d = x.first().map(|m| m.cols()).unwrap_or(0);
        for (s, m) in x.iter().enumerate() {
            if m.rows() != n || m.cols() != d {
                return Err(Error::argument(format!("covariate matrix at time {} has wrong shape", s + 1)));
            }
        }
        for (i, row) in a.iter().enumerate() {
            if row.len() != t {
                return Err(Error::argument(format!("subject {} has {} treatments, expected {t}", subject_ids[i], row.len())));
            }
            if row.iter().any(|&v| v > 1) {
                return Err(Error::argument(format!("subject {} has a non-binary treatment", subject_ids[i])));
            }
        }
        if !x0.is_finite() || !y.is_finite() || x.iter().any(|m| !m.is_finite()) {
            return Err(Error::argument("panel contains non-finite values"));
        }
        Ok(Self { subject_ids, x0, x, a, y })
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_times(&self) -> usize {
        self.y.cols()
    }

    pub fn baseline_dim(&self) -> usize {
        self.x0.cols()
    }

    pub fn covariate_dim(&self) -> usize {
        self.x.first().map(|m| m.cols()).unwrap_or(0)
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn baseline(&self) -> &Matrix {
        &self.x0
    }

    /// Covariates at 1-based time `t`.
    pub fn covariates(&self, t: usize) -> &Matrix {
        &self.x[t - 1]
    }

    /// Treatment of subject `i` at 1-based time `t`; 0 for `t ≤ 0`.
    pub fn treatment(&self, i: usize, t: isize) -> u8 {
        if t <= 0 {
            0
        } else {
            self.a[i][t as usize - 1]
        }
    }

    pub fn treatments(&self) -> &[Vec<u8>] {
        &self.a
    }

    pub fn outcome(&self, i: usize, t: usize) -> f64 {
        self.y[(i, t - 1)]
    }

    pub fn outcomes(&self) -> &Matrix {
        &self.y
    }

    /// Treatment history `(a_{t−k+1}, …, a_t)` of subject `i`.
    pub fn history_bits(&self, i: usize, t: usize, k: usize) -> Vec<u8> {
        (0..k).map(|j| self.treatment(i, t as isize - (k - 1 - j) as isize)).collect()
    }

    pub fn observed_regime(&self, i: usize, t: usize, k: usize) -> usize {
        self.history_bits(i, t, k).iter().fold(0usize, |l, &b| (l << 1) | b as usize)
    }

    /// Keeps the listed subjects, in the given order.
    pub fn select_subjects(&self, rows: &[usize]) -> PanelDataset {
        PanelDataset {
            subject_ids: rows.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            x0: self.x0.select_rows(rows),
            x: self.x.iter().map(|m| m.select_rows(rows)).collect(),
            a: rows.iter().map(|&i| self.a[i].clone()).collect(),
            y: self.y.select_rows(rows),
        }
    }

    pub fn write_csv(&self, baseline_path: &Path, longitudinal_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(baseline_path).map_err(|e| csv_io(baseline_path, e))?;
        let mut header = vec!["subject_id".to_string()];
        header.extend((1..=self.baseline_dim()).map(|j| format!("x0_{j}")));
        w.write_record(&header).map_err(|e| csv_io(baseline_path, e))?;
        for (i, id) in self.subject_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.x0.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_io(baseline_path, e))?;
        }
        w.flush().map_err(|e| Error::io(baseline_path, e))?;

        let mut w = csv::Writer::from_path(longitudinal_path).map_err(|e| csv_io(longitudinal_path, e))?;
        let mut header: Vec<String> = ["subject_id", "time", "treatment", "outcome"].iter().map(|s| s.to_string()).collect();
        header.extend((1..=self.covariate_dim()).map(|j| format!("x_{j}")));
        w.write_record(&header).map_err(|e| csv_io(longitudinal_path, e))?;
        for (i, id) in self.subject_ids.iter().enumerate() {
            for t in 1..=self.n_times() {
                let mut rec = vec![id.clone(), t.to_string(), self.a[i][t - 1].to_string(), self.y[(i, t - 1)].to_string()];
                rec.extend(self.x[t - 1].row(i).iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(|e| csv_io(longitudinal_path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(longitudinal_path, e))
    }

    /// Reads the two-file CSV layout. Subjects are ordered by id (numerically
    /// when every id is an integer).
    pub fn load_csv(baseline_path: &Path, longitudinal_path: &Path) -> Result<PanelDataset> {
        let baseline = read_baseline(baseline_path)?;
        let (d, records) = read_longitudinal(longitudinal_path)?;

        let mut ids: Vec<String> = baseline.keys().cloned().collect();
        let numeric = ids.iter().all(|s| s.parse::<i64>().is_ok());
        if numeric {
            ids.sort_by_key(|s| s.parse::<i64>().unwrap());
        }

        let mut by_subject: BTreeMap<&str, Vec<&LongRow>> = BTreeMap::new();
        for r in &records {
            if !baseline.contains_key(&r.subject) {
                return Err(Error::parse(longitudinal_path, r.row, format!("subject '{}' has no baseline row", r.subject)));
            }
            by_subject.entry(r.subject.as_str()).or_default().push(r);
        }

        let mut n_times = None;
        for id in &ids {
            let rows = by_subject.get_mut(id.as_str()).ok_or_else(|| {
                Error::parse(longitudinal_path, 1, format!("subject '{id}' has no longitudinal rows"))
            })?;
            rows.sort_by_key(|r| r.time);
            for (j, r) in rows.iter().enumerate() {
                if r.time != j + 1 {
                    return Err(Error::parse(
                        longitudinal_path,
                        r.row,
                        format!("ragged panel: subject '{id}' has time {} where {} was expected", r.time, j + 1),
                    ));
                }
            }
            match n_times {
                None => n_times = Some(rows.len()),
                Some(t) if t != rows.len() => {
                    let last = rows.last().unwrap();
                    return Err(Error::parse(
                        longitudinal_path,
                        last.row,
                        format!("ragged panel: subject '{id}' has {} time points, others have {t}", rows.len()),
                    ));
                }
                _ => {}
            }
        }
        let t_max = n_times.unwrap_or(0);
        let n = ids.len();
        let d0 = baseline.values().next().map(|v| v.len()).unwrap_or(0);
        let x0 = Matrix::from_fn(n, d0, |i, j| baseline[&ids[i]][j]);
        let mut x = vec![Matrix::zeros(n, d); t_max];
        let mut a = vec![vec![0u8; t_max]; n];
        let mut y = Matrix::zeros(n, t_max);
        for (i, id) in ids.iter().enumerate() {
            for r in &by_subject[id.as_str()] {
                let t = r.time - 1;
                a[i][t] = r.treatment;
                y[(i, t)] = r.outcome;
                x[t].row_mut(i).copy_from_slice(&r.x);
            }
        }
        PanelDataset::new(ids, x0, x, a, y)
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, 0, format!("{other:?}")),
    }
}

fn parse_float(path: &Path, row: usize, col: &str, s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, row, format!("column '{col}': '{s}' is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(path, row, format!("column '{col}': non-finite value '{s}'")));
    }
    Ok(v)
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(f))
}

fn read_baseline(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut rdr = open_reader(path)?;
    let header = rdr.headers().map_err(|e| Error::parse(path, 1, e.to_string()))?.clone();
    if header.get(0).map(str::trim) != Some("subject_id") {
        return Err(Error::parse(path, 1, "missing column 'subject_id' (must be first)"));
    }
    for (j, name) in header.iter().enumerate().skip(1) {
        if name.trim() != format!("x0_{j}") {
            return Err(Error::parse(path, 1, format!("expected column 'x0_{j}', found '{name}'")));
        }
    }
    let mut out = BTreeMap::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 2;
        let rec = rec.map_err(|e| Error::parse(path, row, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(Error::parse(path, row, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let id = rec[0].trim().to_string();
        let vals = (1..rec.len())
            .map(|j| parse_float(path, row, &header[j], &rec[j]))
            .collect::<Result<Vec<_>>>()?;
        if out.insert(id.clone(), vals).is_some() {
            return Err(Error::parse(path, row, format!("duplicate subject '{id}'")));
        }
    }
    if out.is_empty() {
        return Err(Error::parse(path, 1, "no subjects"));
    }
    Ok(out)
}

struct LongRow {
    row: usize,
    subject: String,
    time: usize,
    treatment: u8,
    outcome: f64,
    x: Vec<f64>,
}

fn read_longitudinal(path: &Path) -> Result<(usize, Vec<LongRow>)> {
    let mut rdr = open_reader(path)?;
    let header = rdr.headers().map_err(|e| Error::parse(path, 1, e.to_string()))?.clone();
    for (j, want) in ["subject_id", "time", "treatment", "outcome"].iter().enumerate() {
        if header.get(j).map(str::trim) != Some(*want) {
            return Err(Error::parse(path, 1, format!("missing column '{want}' at position {}", j + 1)));
        }
    }
    let d = header.len() - 4;
    for j in 1..=d {
        if header[3 + j].trim() != format!("x_{j}") {
            return Err(Error::parse(path, 1, format!("expected column 'x_{j}', found '{}'", &header[3 + j])));
        }
    }
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 2;
        let rec = rec.map_err(|e| Error::parse(path, row, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(Error::parse(path, row, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let subject = rec[0].trim().to_string();
        let time: usize = rec[1]
            .trim()
            .parse()
            .ok()
            .filter(|&t| t >= 1)
            .ok_or_else(|| Error::parse(path, row, format!("time '{}' is not a positive integer", &rec[1])))?;
        let treatment = match parse_float(path, row, "treatment", &rec[2])? {
            v if v == 0.0 => 0,
            v if v == 1.0 => 1,
            _ => return Err(Error::parse(path, row, format!("treatment '{}' is not 0 or 1", rec[2].trim()))),
        };
        let outcome = parse_float(path, row, "outcome", &rec[3])?;
        let x = (4..rec.len())
            .map(|j| parse_float(path, row, &header[j], &rec[j]))
            .collect::<Result<Vec<_>>>()?;
        if !seen.insert((subject.clone(), time)) {
            return Err(Error::parse(path, row, format!("duplicate record for subject '{subject}' at time {time}")));
        }
        out.push(LongRow { row, subject, time, treatment, outcome, x });
    }
    Ok((d, out))
}

/// `(Ω, 𝒴_obs)` of dims `(N, T, 2^k)`, with early times zero-padded.
pub fn observation_tensor(data: &PanelDataset, k: usize) -> Result<(Tensor3, Tensor3)> {
    observation_tensor_with(data, k, EarlyTimes::ZeroPad)
}

pub fn observation_tensor_with(data: &PanelDataset, k: usize, early: EarlyTimes) -> Result<(Tensor3, Tensor3)> {
    let (n, t_max) = (data.n_subjects(), data.n_times());
    if k == 0 || k > t_max {
        return Err(Error::argument(format!("history length k={k} must be in 1..={t_max}")));
    }
    if k > 20 {
        return Err(Error::argument(format!("history length k={k} gives too many regimes")));
    }
    let kk = 1usize << k;
    let mut omega = Tensor3::zeros(n, t_max, kk);
    let mut y_obs = Tensor3::zeros(n, t_max, kk);
    for i in 0..n {
        for t in 1..=t_max {
            if early == EarlyTimes::Drop && t < k {
                continue;
            }
            let l = data.observed_regime(i, t, k);
            omega.set(i, t - 1, l, 1.0);
            y_obs.set(i, t - 1, l, data.outcome(i, t));
        }
    }
    Ok((omega, y_obs))
}

/// Which parts of the history enter a feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistorySpec {
    pub baseline: bool,
    pub covariate_lags: usize,
    pub treatment_lags: usize,
    pub outcome_lags: usize,
}

impl Default for HistorySpec {
    fn default() -> Self {
        Self::lag(2)
    }
}

impl HistorySpec {
    pub const fn lag(lag: usize) -> Self {
        Self { baseline: true, covariate_lags: lag, treatment_lags: lag, outcome_lags: lag }
    }

    pub fn full(data: &PanelDataset) -> Self {
        Self::lag(data.n_times())
    }

    pub fn dim(&self, data: &PanelDataset) -> usize {
        (if self.baseline { data.baseline_dim() } else { 0 })
            + self.covariate_lags * data.covariate_dim()
            + self.treatment_lags
            + self.outcome_lags
    }

    /// Layout: `[X₀ | X_{t−1}, …, X_{t−c} | A_{t−1}, …, A_{t−a} | Y_{t−1}, …, Y_{t−y}]`,
    /// most recent first, zeros for times before 1.
    pub fn features(&self, data: &PanelDataset, i: usize, t: usize) -> Vec<f64> {
        let d = data.covariate_dim();
        let mut out = Vec::with_capacity(self.dim(data));
        if self.baseline {
            out.extend_from_slice(data.baseline().row(i));
        }
        for m in 1..=self.covariate_lags {
            if t > m {
                out.extend_from_slice(data.covariates(t - m).row(i));
            } else {
                out.extend(std::iter::repeat(0.0).take(d));
            }
        }
        for m in 1..=self.treatment_lags {
            out.push(f64::from(data.treatment(i, t as isize - m as isize)));
        }
        for m in 1..=self.outcome_lags {
            out.push(if t > m { data.outcome(i, t - m) } else { 0.0 });
        }
        out
    }
}

/// Baseline covariates followed by the last `lag` covariate vectors,
/// treatments and outcomes before time `t` (see [`HistorySpec::features`]).
pub fn history_vector(data: &PanelDataset, i: usize, t: usize, lag: usize) -> Vec<f64> {
    HistorySpec::lag(lag).features(data, i, t)
}
