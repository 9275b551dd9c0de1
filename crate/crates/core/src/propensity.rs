//! Treatment models `e(H_{i,t}; α_t)` fitted per time point by penalized
//! logistic regression, and the inverse-probability weight tensor they
//! induce.
//!
//! Features are centred and scaled to unit variance before fitting and the
//! penalty acts on the standardized coefficients; reported coefficients are
//! mapped back to the raw feature scale. The intercept is never penalized.

use std::path::Path;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{solve_spd, Matrix};
use crate::panel::{HistorySpec, PanelDataset};
use crate::tensor::Tensor3;

pub const SCAD_EPS: f64 = 3.7;
/// Bound on standardized coefficients; reaching it flags (quasi-)separation.
pub const COEF_CAP: f64 = 30.0;
pub const PROB_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    None,
    Lasso,
    Scad,
}

impl std::fmt::Display for Penalty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Penalty::None => "none",
            Penalty::Lasso => "lasso",
            Penalty::Scad => "scad",
        })
    }
}

impl std::str::FromStr for Penalty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Penalty::None),
            "lasso" => Ok(Penalty::Lasso),
            "scad" => Ok(Penalty::Scad),
            _ => Err(Error::argument(format!("unknown penalty '{s}'"))),
        }
    }
}

/// SCAD penalty `p_λ(θ)`; the middle branch is the integral of `p′_λ`.
pub fn scad_penalty(theta: f64, lambda: f64, eps: f64) -> f64 {
    let a = theta.abs();
    if a <= lambda {
        lambda * a
    } else if a <= eps * lambda {
        (2.0 * eps * lambda * a - a * a - lambda * lambda) / (2.0 * (eps - 1.0))
    } else {
        lambda * lambda * (eps + 1.0) / 2.0
    }
}

/// `p′_λ(|θ|) = λ{I(|θ| ≤ λ) + (ελ − |θ|)₊ / ((ε − 1)λ) · I(|θ| > λ)}`.
pub fn scad_derivative(theta: f64, lambda: f64, eps: f64) -> f64 {
    let a = theta.abs();
    if a <= lambda {
        lambda
    } else {
        (eps * lambda - a).max(0.0) / (eps - 1.0)
    }
}

fn penalty_value(penalty: Penalty, theta: f64, lambda: f64, eps: f64) -> f64 {
    match penalty {
        Penalty::None => 0.0,
        Penalty::Lasso => lambda * theta.abs(),
        Penalty::Scad => scad_penalty(theta, lambda, eps),
    }
}

/// `λ = c·sqrt(log(d_H)/N)` with `c = 0.5`.
pub fn default_lambda(n: usize, d_h: usize) -> f64 {
    default_lambda_scaled(n, d_h, 0.5)
}

pub fn default_lambda_scaled(n: usize, d_h: usize, c: f64) -> f64 {
    c * ((d_h.max(1) as f64).ln() / n.max(1) as f64).sqrt()
}

#[inline]
fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
fn log1pexp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticOptions {
    pub penalty: Penalty,
    pub lambda: f64,
    pub scad_eps: f64,
    pub max_outer: usize,
    pub tol: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self { penalty: Penalty::Scad, lambda: 0.0, scad_eps: SCAD_EPS, max_outer: 200, tol: 1e-8 }
    }
}

/// One fitted logistic regression on the raw feature scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub intercept: f64,
    pub coefs: Vec<f64>,
    /// Coefficients on the standardized scale (zero for constant features).
    pub std_coefs: Vec<f64>,
    pub separated: bool,
    pub outer_iters: usize,
    pub converged: bool,
    /// Penalized objective (standardized scale) after each outer iteration,
    /// starting from the all-zero initial point.
    pub objective: Vec<f64>,
}

impl LogisticFit {
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.intercept + self.coefs.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        expit(self.linear_predictor(x))
    }

    pub fn n_nonzero(&self) -> usize {
        self.coefs.iter().filter(|&&b| b != 0.0).count()
    }
}

struct Standardized {
    z: Matrix,
    center: Vec<f64>,
    scale: Vec<f64>,
    active: Vec<bool>,
}

fn standardize(x: &Matrix) -> Standardized {
    let (n, d) = x.shape();
    let mut center = vec![0.0; d];
    let mut scale = vec![1.0; d];
    let mut active = vec![true; d];
    for j in 0..d {
        let col = x.column(j);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        center[j] = mean;
        if var <= 1e-24 * (1.0 + mean * mean) {
            active[j] = false;
        } else {
            scale[j] = var.sqrt();
        }
    }
    let z = Matrix::from_fn(n, d, |i, j| if active[j] { (x[(i, j)] - center[j]) / scale[j] } else { 0.0 });
    Standardized { z, center, scale, active }
}

fn neg_loglik(z: &Matrix, y: &[f64], b0: f64, b: &[f64]) -> f64 {
    let n = z.rows();
    let mut s = 0.0;
    for i in 0..n {
        let eta = b0 + crate::linalg::dot(z.row(i), b);
        s += log1pexp(eta) - y[i] * eta;
    }
    s / n as f64
}

fn weighted_l1(w: &[f64], b: &[f64]) -> f64 {
    w.iter().zip(b).map(|(w, b)| w * b.abs()).sum()
}

/// Minimizes `(1/N)·NLL(b0, b) + Σ w_j |b_j|` by proximal Newton steps
/// (IRLS quadratic model solved by coordinate descent) with step halving,
/// warm-started at `(b0, b)`.
fn weighted_lasso_logistic(z: &Matrix, y: &[f64], w: &[f64], active: &[bool], b0: &mut f64, b: &mut [f64]) {
    let (n, d) = z.shape();
    let nf = n as f64;
    let objective = |b0: f64, b: &[f64]| neg_loglik(z, y, b0, b) + weighted_l1(w, b);
    let mut f_cur = objective(*b0, b);
    let cols: Vec<Vec<f64>> = (0..d).map(|j| (0..n).map(|i| z[(i, j)]).collect()).collect();
    for _newton in 0..100 {
        let mut eta = vec![0.0; n];
        let mut v = vec![0.0; n];
        let mut zr = vec![0.0; n];
        for i in 0..n {
            eta[i] = *b0 + crate::linalg::dot(z.row(i), b);
            let p = expit(eta[i]);
            v[i] = (p * (1.0 - p)).max(1e-5);
            zr[i] = eta[i] + (y[i] - p) / v[i];
        }
        // Coordinate descent on (1/2N) Σ v_i (zr_i − c0 − z_i c)² + Σ w_j |c_j|.
        let mut c0 = *b0;
        let mut c = b.to_vec();
        let mut resid: Vec<f64> = (0..n).map(|i| zr[i] - eta[i]).collect();
        let col_w: Vec<f64> = (0..d)
            .map(|j| cols[j].iter().zip(&v).map(|(x, vi)| vi * x * x).sum::<f64>() / nf)
            .collect();
        let v_sum: f64 = v.iter().sum();
        for _sweep in 0..1000 {
            let mut max_delta = 0.0f64;
            let delta0 = (0..n).map(|i| v[i] * resid[i]).sum::<f64>() / v_sum;
            if delta0 != 0.0 {
                c0 += delta0;
                for r in resid.iter_mut() {
                    *r -= delta0;
                }
                max_delta = max_delta.max(v_sum / nf * delta0 * delta0);
            }
            for j in 0..d {
                if !active[j] || col_w[j] <= 0.0 {
                    continue;
                }
                let col = &cols[j];
                let grad = (0..n).map(|i| v[i] * col[i] * resid[i]).sum::<f64>() / nf;
                let u = grad + col_w[j] * c[j];
                let new = soft_threshold(u, w[j]) / col_w[j];
                let new = new.clamp(-COEF_CAP, COEF_CAP);
                let delta = new - c[j];
                if delta != 0.0 {
                    for (r, x) in resid.iter_mut().zip(col) {
                        *r -= delta * x;
                    }
                    c[j] = new;
                    max_delta = max_delta.max(col_w[j] * delta * delta);
                }
            }
            // Largest decrease of the quadratic model from one coordinate.
            if max_delta < 1e-14 {
                break;
            }
        }
        c0 = c0.clamp(-COEF_CAP, COEF_CAP);
        // Step halving along the proximal Newton direction.
        let d0 = c0 - *b0;
        let db: Vec<f64> = c.iter().zip(b.iter()).map(|(c, b)| c - b).collect();
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let t0 = *b0 + step * d0;
            let tb: Vec<f64> = b.iter().zip(&db).map(|(b, d)| b + step * d).collect();
            let f_new = objective(t0, &tb);
            if f_new <= f_cur {
                let change = step * db.iter().fold(d0.abs(), |m, d| m.max(d.abs()));
                *b0 = t0;
                b.copy_from_slice(&tb);
                let gain = f_cur - f_new;
                f_cur = f_new;
                accepted = true;
                if change < 1e-10 || gain <= 1e-12 * f_cur.abs().max(1.0) {
                    return;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return;
        }
    }
}

#[inline]
fn soft_threshold(u: f64, t: f64) -> f64 {
    if u > t {
        u - t
    } else if u < -t {
        u + t
    } else {
        0.0
    }
}

/// Unpenalized Newton–Raphson with step halving on the standardized design.
fn newton_logistic(z: &Matrix, y: &[f64], active: &[bool], b0: &mut f64, b: &mut [f64]) -> Result<()> {
    let (n, d) = z.shape();
    let idx: Vec<usize> = (0..d).filter(|&j| active[j]).collect();
    let m = idx.len() + 1;
    let mut f_cur = neg_loglik(z, y, *b0, b);
    for _ in 0..100 {
        let mut grad = vec![0.0; m];
        let mut hess = Matrix::zeros(m, m);
        let mut feat = vec![0.0; m];
        for i in 0..n {
            let eta = *b0 + crate::linalg::dot(z.row(i), b);
            let p = expit(eta);
            let v = p * (1.0 - p);
            feat[0] = 1.0;
            for (s, &j) in idx.iter().enumerate() {
                feat[s + 1] = z[(i, j)];
            }
            for a in 0..m {
                grad[a] += (p - y[i]) * feat[a];
                for c in 0..=a {
                    hess[(a, c)] += v * feat[a] * feat[c];
                }
            }
        }
        for a in 0..m {
            for c in 0..a {
                hess[(c, a)] = hess[(a, c)];
            }
        }
        let step_dir = solve_spd(&hess, &Matrix::column_vector(&grad), 1e-12)?.x;
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let t0 = (*b0 - step * step_dir[(0, 0)]).clamp(-COEF_CAP, COEF_CAP);
            let mut tb = b.to_vec();
            for (s, &j) in idx.iter().enumerate() {
                tb[j] = (b[j] - step * step_dir[(s + 1, 0)]).clamp(-COEF_CAP, COEF_CAP);
            }
            let f_new = neg_loglik(z, y, t0, &tb);
            if f_new <= f_cur {
                let change = (t0 - *b0).abs().max(tb.iter().zip(b.iter()).fold(0.0, |m, (a, c)| m.max((a - c).abs())));
                *b0 = t0;
                b.copy_from_slice(&tb);
                f_cur = f_new;
                moved = change > 1e-12;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok(())
}

/// Fits `P(y = 1 | x) = expit(α₀ + xᵀα₁)` with the configured penalty.
pub fn fit_logistic(x: &Matrix, y: &[u8], opts: &LogisticOptions) -> Result<LogisticFit> {
    let (n, d) = x.shape();
    if n != y.len() {
        return Err(Error::argument("design rows and responses differ in length"));
    }
    if n == 0 {
        return Err(Error::argument("no observations"));
    }
    if !(opts.lambda >= 0.0) || !(opts.scad_eps > 2.0) {
        return Err(Error::argument("penalty requires λ ≥ 0 and ε > 2"));
    }
    let n1 = y.iter().filter(|&&v| v == 1).count();
    if n1 == 0 || n1 == n {
        return Err(Error::argument(
            "only one treatment arm is present; merge or drop this time point",
        ));
    }
    let yf: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
    let st = standardize(x);
    let mut b0 = 0.0;
    let mut b = vec![0.0; d];
    let penalized = opts.penalty != Penalty::None && opts.lambda > 0.0;
    let objective = |b0: f64, b: &[f64]| {
        neg_loglik(&st.z, &yf, b0, b)
            + b.iter().map(|&v| if penalized { penalty_value(opts.penalty, v, opts.lambda, opts.scad_eps) } else { 0.0 }).sum::<f64>()
    };
    let mut trajectory = vec![objective(b0, &b)];
    let mut converged = false;
    let mut outer = 0;
    if !penalized {
        newton_logistic(&st.z, &yf, &st.active, &mut b0, &mut b)?;
        trajectory.push(objective(b0, &b));
        converged = true;
        outer = 1;
    } else {
        while outer < opts.max_outer {
            outer += 1;
            let w: Vec<f64> = b
                .iter()
                .map(|&v| match opts.penalty {
                    Penalty::Scad => scad_derivative(v, opts.lambda, opts.scad_eps),
                    _ => opts.lambda,
                })
                .collect();
            let (old0, old) = (b0, b.clone());
            weighted_lasso_logistic(&st.z, &yf, &w, &st.active, &mut b0, &mut b);
            let f_prev = *trajectory.last().unwrap();
            let f_new = objective(b0, &b);
            trajectory.push(f_new);
            let change = b.iter().zip(&old).fold((b0 - old0).abs(), |m, (a, c)| m.max((a - c).abs()));
            let stalled = (f_prev - f_new).abs() <= opts.tol * f_new.abs().max(1.0);
            // The lasso is a single convex problem; SCAD iterates the local
            // linear approximation.
            if opts.penalty == Penalty::Lasso || change < opts.tol || stalled {
                converged = true;
                break;
            }
        }
    }
    let separated = b0.abs() >= COEF_CAP - 1e-9 || b.iter().any(|v| v.abs() >= COEF_CAP - 1e-9);
    if separated {
        warn!("logistic fit hit the coefficient cap ({COEF_CAP}); treatment arms look separated");
    }
    let coefs: Vec<f64> = (0..d).map(|j| if st.active[j] { b[j] / st.scale[j] } else { 0.0 }).collect();
    let intercept = b0 - (0..d).map(|j| coefs[j] * st.center[j]).sum::<f64>();
    debug!("logistic fit: {} outer iterations, {} nonzero", outer, coefs.iter().filter(|v| **v != 0.0).count());
    Ok(LogisticFit { intercept, coefs, std_coefs: b, separated, outer_iters: outer, converged, objective: trajectory })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropensityConfig {
    pub penalty: Penalty,
    /// Fixed `λ_α`; `None` uses [`default_lambda_scaled`] with `lambda_scale`.
    pub lambda: Option<f64>,
    pub lambda_scale: f64,
    pub scad_eps: f64,
    pub history: HistorySpec,
    pub max_outer: usize,
    pub tol: f64,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        Self {
            penalty: Penalty::Scad,
            lambda: None,
            lambda_scale: 0.5,
            scad_eps: SCAD_EPS,
            history: HistorySpec::default(),
            max_outer: 200,
            tol: 1e-8,
        }
    }
}

impl PropensityConfig {
    pub fn lambda_for(&self, n: usize, d_h: usize) -> f64 {
        self.lambda.unwrap_or_else(|| default_lambda_scaled(n, d_h, self.lambda_scale))
    }
}

/// Feature matrix `H_t` (rows = subjects) for 1-based time `t`.
pub fn history_matrix(data: &PanelDataset, t: usize, history: &HistorySpec) -> Matrix {
    let d = history.dim(data);
    let mut m = Matrix::zeros(data.n_subjects(), d);
    for i in 0..data.n_subjects() {
        m.row_mut(i).copy_from_slice(&history.features(data, i, t));
    }
    m
}

/// Fits the treatment model at 1-based time `t`.
pub fn fit_propensity(data: &PanelDataset, t: usize, config: &PropensityConfig) -> Result<LogisticFit> {
    if t == 0 || t > data.n_times() {
        return Err(Error::argument(format!("time {t} outside 1..={}", data.n_times())));
    }
    let h = history_matrix(data, t, &config.history);
    let y: Vec<u8> = (0..data.n_subjects()).map(|i| data.treatments()[i][t - 1]).collect();
    let opts = LogisticOptions {
        penalty: config.penalty,
        lambda: config.lambda_for(data.n_subjects(), h.cols()),
        scad_eps: config.scad_eps,
        max_outer: config.max_outer,
        tol: config.tol,
    };
    fit_logistic(&h, &y, &opts).map_err(|e| match e {
        Error::Argument(msg) => Error::argument(format!("time {t}: {msg}")),
        other => other,
    })
}

/// Fitted treatment models for every time point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub penalty: Penalty,
    pub scad_eps: f64,
    pub history: HistorySpec,
    /// `λ_α` used at each time.
    pub lambdas: Vec<f64>,
    pub fits: Vec<LogisticFit>,
}

impl PropensityModel {
    pub fn fit(data: &PanelDataset, config: &PropensityConfig) -> Result<Self> {
        let d_h = config.history.dim(data);
        let lambda = config.lambda_for(data.n_subjects(), d_h);
        let fits = (1..=data.n_times()).map(|t| fit_propensity(data, t, config)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            penalty: config.penalty,
            scad_eps: config.scad_eps,
            history: config.history,
            lambdas: vec![lambda; data.n_times()],
            fits,
        })
    }

    pub fn any_separated(&self) -> bool {
        self.fits.iter().any(|f| f.separated)
    }

    /// `N × T` matrix of fitted `P(A_{i,t} = 1 | H_{i,t})`.
    pub fn probabilities(&self, data: &PanelDataset) -> Result<Matrix> {
        if self.fits.len() != data.n_times() {
            return Err(Error::argument(format!(
                "model covers {} time points, panel has {}",
                self.fits.len(),
                data.n_times()
            )));
        }
        if self.history.dim(data) != self.fits[0].coefs.len() {
            return Err(Error::argument("model history dimension does not match the panel"));
        }
        let mut p = Matrix::zeros(data.n_subjects(), data.n_times());
        for t in 1..=data.n_times() {
            for i in 0..data.n_subjects() {
                p[(i, t - 1)] = self.fits[t - 1].probability(&self.history.features(data, i, t));
            }
        }
        Ok(p)
    }

    /// Rows `(t, coef_index, value, penalty, lambda)`; `coef_index` 0 is the
    /// intercept.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        w.write_record(["t", "coef_index", "value", "penalty", "lambda"]).map_err(io)?;
        for (s, fit) in self.fits.iter().enumerate() {
            let values = std::iter::once(fit.intercept).chain(fit.coefs.iter().copied());
            for (j, v) in values.enumerate() {
                w.write_record(&[
                    (s + 1).to_string(),
                    j.to_string(),
                    v.to_string(),
                    self.penalty.to_string(),
                    self.lambdas[s].to_string(),
                ])
                .map_err(io)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads the CSV written by [`PropensityModel::write_csv`]; the history
    /// layout is not stored in the file and must be supplied.
    pub fn read_csv(path: &Path, history: HistorySpec) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(f);
        let mut rows: Vec<(usize, usize, f64, Penalty, f64)> = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let row = r + 2;
            let rec = rec.map_err(|e| Error::parse(path, row, e.to_string()))?;
            if rec.len() != 5 {
                return Err(Error::parse(path, row, "expected 5 fields"));
            }
            let num = |k: usize| -> Result<f64> {
                rec[k].trim().parse::<f64>().map_err(|_| Error::parse(path, row, format!("bad number '{}'", &rec[k])))
            };
            let t = rec[0].trim().parse::<usize>().map_err(|_| Error::parse(path, row, "bad time"))?;
            let j = rec[1].trim().parse::<usize>().map_err(|_| Error::parse(path, row, "bad coef_index"))?;
            let pen: Penalty = rec[3].parse().map_err(|e: Error| Error::parse(path, row, e.to_string()))?;
            rows.push((t, j, num(2)?, pen, num(4)?));
        }
        let t_max = rows.iter().map(|r| r.0).max().ok_or_else(|| Error::parse(path, 1, "empty model"))?;
        let mut fits = Vec::with_capacity(t_max);
        let mut lambdas = Vec::with_capacity(t_max);
        let mut penalty = Penalty::None;
        for t in 1..=t_max {
            let mut these: Vec<_> = rows.iter().filter(|r| r.0 == t).collect();
            these.sort_by_key(|r| r.1);
            if these.is_empty() || these.iter().enumerate().any(|(j, r)| r.1 != j) {
                return Err(Error::parse(path, 1, format!("coefficients for time {t} are incomplete")));
            }
            penalty = these[0].3;
            lambdas.push(these[0].4);
            fits.push(LogisticFit {
                intercept: these[0].2,
                coefs: these[1..].iter().map(|r| r.2).collect(),
                std_coefs: Vec::new(),
                separated: false,
                outer_iters: 0,
                converged: true,
                objective: Vec::new(),
            });
        }
        Ok(Self { penalty, scad_eps: SCAD_EPS, history, lambdas, fits })
    }
}

/// Inverse-probability weights on the observed support.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub w: Tensor3,
    pub truncation: Option<f64>,
    /// Number of probabilities that had to be clamped into `[1e-6, 1 − 1e-6]`.
    pub clamped: usize,
}

/// `Ŵ_{i,t,l} = [∏_{j} e_j^{A_j}(1 − e_j)^{1−A_j}]⁻¹` over
/// `j = max(1, t−k+1), …, t` at the observed regime `l`, zero elsewhere.
/// `probs[(i, t−1)]` is the probability of treatment at time `t`.
pub fn weight_tensor_from_probs(data: &PanelDataset, probs: &Matrix, k: usize, truncation: Option<f64>) -> Result<WeightTensor> {
    let (n, t_max) = (data.n_subjects(), data.n_times());
    if probs.shape() != (n, t_max) {
        return Err(Error::argument(format!("probabilities must be {n}×{t_max}, got {:?}", probs.shape())));
    }
    if k == 0 || k > t_max || k > 20 {
        return Err(Error::argument(format!("history length k={k} must be in 1..={t_max}")));
    }
    if let Some(c) = truncation {
        if !(c >= 1.0) {
            return Err(Error::argument("weight truncation bound must be ≥ 1"));
        }
    }
    if !probs.is_finite() {
        return Err(Error::numerical("non-finite propensity scores"));
    }
    let mut w = Tensor3::zeros(n, t_max, 1 << k);
    let mut clamped = 0usize;
    for i in 0..n {
        for t in 1..=t_max {
            let mut prod = 1.0;
            for j in t.saturating_sub(k - 1).max(1)..=t {
                let mut p = probs[(i, j - 1)];
                if !(PROB_FLOOR..=1.0 - PROB_FLOOR).contains(&p) {
                    clamped += 1;
                    p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                }
                prod *= if data.treatments()[i][j - 1] == 1 { p } else { 1.0 - p };
            }
            let mut weight = 1.0 / prod;
            if let Some(c) = truncation {
                weight = weight.clamp(1.0, c);
            }
            w.set(i, t - 1, data.observed_regime(i, t, k), weight);
        }
    }
    if clamped > 0 {
        warn!("{clamped} propensity scores clamped to [{PROB_FLOOR}, {}]; overlap looks violated", 1.0 - PROB_FLOOR);
    }
    Ok(WeightTensor { w, truncation, clamped })
}

/// Weight tensor from fitted treatment models.
pub fn weight_tensor(data: &PanelDataset, model: &PropensityModel, k: usize, truncation: Option<f64>) -> Result<WeightTensor> {
    let probs = model.probabilities(data)?;
    weight_tensor_from_probs(data, &probs, k, truncation)
}
