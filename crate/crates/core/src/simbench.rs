//! Synthetic longitudinal panels with a fully materialized counterfactual
//! outcome tensor, plus a small experiment runner.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::warn;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimands::{ate, fit_method, normalized_error, AteQuery, EstimationSettings, Method};
use crate::linalg::Matrix;
use crate::metrics::MetricRow;
use crate::panel::{decode_regime, PanelDataset};
use crate::propensity::{weight_tensor, weight_tensor_from_probs, PropensityModel};
use crate::rng::stream;
use crate::sieve::legendre_values;
use crate::tensor::{MultilinearRank, Tensor3};

pub const ETA: [f64; 3] = [0.5, 0.25, 0.125];
pub const BETA: [f64; 2] = [1.0, 1.0];
pub const GAMMA: [f64; 2] = [3.0, 3.0];
pub const LEGENDRE_ORDER: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutcomeModel {
    M1,
    M2,
    #[serde(rename = "M2-gamma")]
    M2Gamma,
}

impl fmt::Display for OutcomeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutcomeModel::M1 => "M1",
            OutcomeModel::M2 => "M2",
            OutcomeModel::M2Gamma => "M2-gamma",
        })
    }
}

impl FromStr for OutcomeModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(OutcomeModel::M1),
            "m2" => Ok(OutcomeModel::M2),
            "m2-gamma" | "m2gamma" | "m2_gamma" => Ok(OutcomeModel::M2Gamma),
            _ => Err(Error::argument(format!("unknown outcome model '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Assignment {
    A1,
    A2,
    Randomized,
    /// Every subject receives the same treatment at every time.
    Forced(u8),
}

impl Assignment {
    fn slope(&self) -> f64 {
        match self {
            Assignment::A1 => 1.0,
            Assignment::A2 => 2.0,
            _ => 0.0,
        }
    }

    /// `P(A_t = 1)` given the two most recent covariate values.
    pub fn probability(&self, x_prev: f64, x_prev2: f64) -> f64 {
        match self {
            Assignment::A1 | Assignment::A2 => expit(self.slope() * (x_prev + x_prev2)),
            Assignment::Randomized => 0.5,
            Assignment::Forced(b) => f64::from(*b),
        }
    }
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Assignment::A1 => f.write_str("A1"),
            Assignment::A2 => f.write_str("A2"),
            Assignment::Randomized => f.write_str("randomized"),
            Assignment::Forced(b) => write!(f, "forced{b}"),
        }
    }
}

impl FromStr for Assignment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a1" => Ok(Assignment::A1),
            "a2" => Ok(Assignment::A2),
            "randomized" | "random" => Ok(Assignment::Randomized),
            "forced0" => Ok(Assignment::Forced(0)),
            "forced1" => Ok(Assignment::Forced(1)),
            _ => Err(Error::argument(format!("unknown assignment '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// One draw per `(i, t)` added to every regime slice.
    #[default]
    Shared,
    PerSlice,
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimDesign {
    pub outcome: OutcomeModel,
    pub assignment: Assignment,
    pub gamma_sd: f64,
    pub n: usize,
    pub t: usize,
    pub k: usize,
    pub d0: usize,
    pub seed: u64,
    pub reps: usize,
    pub noise_sd: f64,
    pub noise_mode: NoiseMode,
}

impl Default for SimDesign {
    fn default() -> Self {
        SimDesign {
            outcome: OutcomeModel::M1,
            assignment: Assignment::A1,
            gamma_sd: 0.0,
            n: 100,
            t: 10,
            k: 5,
            d0: 20,
            seed: 0,
            reps: 1,
            noise_sd: 1.0,
            noise_mode: NoiseMode::Shared,
        }
    }
}

impl SimDesign {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t == 0 || self.k == 0 || self.d0 == 0 {
            return Err(Error::argument("n, t, k and d0 must be positive"));
        }
        if self.k > self.t {
            return Err(Error::argument(format!("k = {} exceeds t = {}", self.k, self.t)));
        }
        if self.k > 20 {
            return Err(Error::argument(format!("k = {} gives too many regimes", self.k)));
        }
        if !(self.gamma_sd >= 0.0 && self.gamma_sd.is_finite()) {
            return Err(Error::argument("gamma_sd must be finite and nonnegative"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::argument("noise_sd must be finite and nonnegative"));
        }
        if let Assignment::Forced(b) = self.assignment {
            if b > 1 {
                return Err(Error::argument("forced treatment must be 0 or 1"));
            }
        }
        Ok(())
    }

    pub fn n_regimes(&self) -> usize {
        1 << self.k
    }

    /// Multilinear rank of the noiseless counterfactual tensor implied by
    /// the outcome model.
    pub fn true_rank(&self) -> [usize; 3] {
        match self.outcome {
            OutcomeModel::M1 => [2, 1, self.k + 1],
            OutcomeModel::M2 | OutcomeModel::M2Gamma => [4, 2, self.k + 3],
        }
    }
}

/// Subject-level quantities the outcome formulas depend on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectTerms {
    /// Sum of the baseline entries.
    pub s: f64,
    /// Averaged Legendre terms of orders one and two.
    pub legendre: f64,
    /// Sum of the covariate-orthogonal effects.
    pub gamma: f64,
}

impl SubjectTerms {
    pub fn from_baseline(x0: &[f64], gamma: f64) -> Self {
        let d0 = x0.len() as f64;
        let mut legendre = 0.0;
        for &x in x0 {
            let p = legendre_values(x, LEGENDRE_ORDER);
            legendre += p[1..].iter().sum::<f64>();
        }
        SubjectTerms { s: x0.iter().sum(), legendre: legendre / d0, gamma }
    }
}

/// `a_{t−m}` under the regime `bits` (earliest first); zero before the window.
fn lagged(bits: &[u8], m: usize) -> f64 {
    let k = bits.len();
    if m < k {
        f64::from(bits[k - 1 - m])
    } else {
        0.0
    }
}

/// Counterfactual time-varying covariate `X_{t−shift}` under a regime.
pub fn counterfactual_covariate(s: f64, bits: &[u8], shift: usize) -> f64 {
    s + ETA[0] * lagged(bits, shift) + ETA[1] * lagged(bits, shift + 1) + ETA[2] * lagged(bits, shift + 2)
}

/// Noiseless counterfactual outcome at time `t` (1-based) under the regime `bits`.
pub fn outcome_signal(model: OutcomeModel, terms: &SubjectTerms, t: usize, bits: &[u8]) -> f64 {
    let s = terms.s;
    let k = bits.len();
    let xt = counterfactual_covariate(s, bits, 0);
    let xt1 = counterfactual_covariate(s, bits, 1);
    let a0 = lagged(bits, 0);
    let a1 = lagged(bits, 1);
    let linear = BETA[0] * xt + BETA[1] * xt1 + GAMMA[0] * a0 + GAMMA[1] * a1;
    match model {
        OutcomeModel::M1 => 4.0 * s + linear,
        OutcomeModel::M2 | OutcomeModel::M2Gamma => {
            let s_all: f64 = (0..k).map(|m| lagged(bits, m)).sum();
            let s_recent: f64 = (0..k.saturating_sub(1)).map(|m| lagged(bits, m)).sum();
            let s_early: f64 = (1..k).map(|m| lagged(bits, m)).sum();
            let mut y = 4.0 * terms.legendre
                + 4.0 * s * 0.5f64.powi(t as i32)
                + 3.0 * s_all * s
                + 2.0 * a0 * s
                + a1 * s
                + s_recent * s * xt
                + s_early * s * xt1
                + 5.0 * BETA[0] * xt * s
                + 3.0 * BETA[1] * xt1 * s
                + linear;
            if model == OutcomeModel::M2Gamma {
                y += 4.0 * terms.gamma;
            }
            y
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimData {
    pub design: SimDesign,
    pub rep: usize,
    pub panel: PanelDataset,
    /// Counterfactual outcomes including the noise draws; the observed
    /// outcome is exactly the entry at the received regime.
    pub y_star: Tensor3,
    /// Counterfactual outcomes without noise.
    pub y_signal: Tensor3,
    /// Mean of the all-ones minus all-zeros slice over every `(i, t)`.
    pub true_ate: f64,
    /// Generator treatment probabilities `P(A_{i,t} = 1 | H_{i,t})`, N×T.
    pub propensities: Matrix,
    pub subject_terms: Vec<SubjectTerms>,
}

pub fn generate(design: &SimDesign, rep: usize) -> Result<SimData> {
    generate_with_baseline(design, rep, None)
}

/// As [`generate`], optionally replacing the drawn baseline covariates.
pub fn generate_with_baseline(design: &SimDesign, rep: usize, x0_override: Option<&Matrix>) -> Result<SimData> {
    design.validate()?;
    let (n, tt, k, d0) = (design.n, design.t, design.k, design.d0);
    let kk = design.n_regimes();
    let r = rep as u64;

    let mut rng = stream(design.seed, "x0", r);
    let drawn = Matrix::from_fn(n, d0, |_, _| rng.sample(StandardNormal));
    let x0 = match x0_override {
        Some(m) => {
            if m.shape() != (n, d0) {
                return Err(Error::argument(format!(
                    "baseline override is {:?}, expected ({n}, {d0})",
                    m.shape()
                )));
            }
            m.clone()
        }
        None => drawn,
    };

    let mut rng = stream(design.seed, "gamma", r);
    let gammas: Vec<f64> = (0..n)
        .map(|_| {
            let g1: f64 = rng.sample(StandardNormal);
            let g2: f64 = rng.sample(StandardNormal);
            design.gamma_sd * (g1 + g2)
        })
        .collect();
    let terms: Vec<SubjectTerms> = (0..n).map(|i| SubjectTerms::from_baseline(x0.row(i), gammas[i])).collect();

    let regimes: Vec<Vec<u8>> = (0..kk).map(|l| decode_regime(l, k)).collect::<Result<_>>()?;
    let mut y_signal = Tensor3::zeros(n, tt, kk);
    for (l, bits) in regimes.iter().enumerate() {
        for t in 0..tt {
            for (i, term) in terms.iter().enumerate() {
                y_signal.set(i, t, l, outcome_signal(design.outcome, term, t + 1, bits));
            }
        }
    }

    let mut rng = stream(design.seed, "noise", r);
    let mut y_star = y_signal.clone();
    match design.noise_mode {
        NoiseMode::Shared => {
            for i in 0..n {
                for t in 0..tt {
                    let e: f64 = rng.sample::<f64, _>(StandardNormal) * design.noise_sd;
                    for l in 0..kk {
                        y_star.set(i, t, l, y_star.get(i, t, l) + e);
                    }
                }
            }
        }
        NoiseMode::PerSlice => {
            for i in 0..n {
                for t in 0..tt {
                    for l in 0..kk {
                        let e: f64 = rng.sample::<f64, _>(StandardNormal) * design.noise_sd;
                        y_star.set(i, t, l, y_star.get(i, t, l) + e);
                    }
                }
            }
        }
    }

    let mut rng = stream(design.seed, "assign", r);
    let mut a = vec![vec![0u8; tt]; n];
    let mut xs = vec![Matrix::zeros(n, 1); tt];
    let mut y = Matrix::zeros(n, tt);
    let mut props = Matrix::zeros(n, tt);
    for i in 0..n {
        let s = terms[i].s;
        let mut x_hist = [0.0f64; 2];
        for t in 0..tt {
            let p = design.assignment.probability(x_hist[0], x_hist[1]);
            props[(i, t)] = p;
            let u: f64 = rng.gen();
            a[i][t] = u8::from(u < p);
            let past = |m: usize| if t >= m { f64::from(a[i][t - m]) } else { 0.0 };
            let xt = s + ETA[0] * past(0) + ETA[1] * past(1) + ETA[2] * past(2);
            xs[t][(i, 0)] = xt;
            x_hist = [xt, x_hist[0]];
            let bits: Vec<u8> = (0..k).map(|j| if t + j + 1 >= k { a[i][t + j + 1 - k] } else { 0 }).collect();
            let l = crate::panel::encode_regime(&bits)?;
            y[(i, t)] = y_star.get(i, t, l);
        }
    }

    let ids = (1..=n).map(|i| i.to_string()).collect();
    let panel = PanelDataset::new(ids, x0, xs, a, y)?;
    let ones = kk - 1;
    let mut total = 0.0;
    for t in 0..tt {
        for i in 0..n {
            total += y_star.get(i, t, ones) - y_star.get(i, t, 0);
        }
    }
    let true_ate = total / (n * tt) as f64;
    Ok(SimData {
        design: design.clone(),
        rep,
        panel,
        y_star,
        y_signal,
        true_ate,
        propensities: props,
        subject_terms: terms,
    })
}

impl SimDesign {
    /// Short label used as the `experiment` column.
    pub fn label(&self) -> String {
        format!(
            "{}-{}-g{}-n{}-t{}-k{}",
            self.outcome, self.assignment, self.gamma_sd, self.n, self.t, self.k
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSettings {
    pub methods: Vec<Method>,
    pub estimation: EstimationSettings,
    /// Fixed rank for the tensor methods; `None` uses the design's true rank.
    pub rank: Option<MultilinearRank>,
    /// Use the generator's propensities instead of fitted ones.
    pub oracle_weights: bool,
    /// Worker threads; `0` picks the available parallelism.
    pub threads: usize,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            methods: vec![Method::CoTucker],
            estimation: EstimationSettings::default(),
            rank: None,
            oracle_weights: false,
            threads: 0,
        }
    }
}

fn run_rep(design: &SimDesign, rep: usize, settings: &ExperimentSettings) -> Vec<MetricRow> {
    let label = design.label();
    let row = |method: &str, metric: &str, value: f64| MetricRow::new(&label, method, "full", metric, value).with_rep(rep);
    let fail = |method: &str, e: &Error| {
        warn!("{label} rep {rep} {method}: {e}");
        row(method, "error", f64::from(e.exit_code()))
    };
    let sim = match generate(design, rep) {
        Ok(s) => s,
        Err(e) => return vec![fail("generate", &e)],
    };
    let mut rows = vec![row("oracle", "ate", sim.true_ate)];
    let mut est = settings.estimation.clone();
    est.k = design.k;
    let r = settings.rank.map(|r| r.as_array()).unwrap_or_else(|| design.true_rank());
    est.fit.rank = MultilinearRank::new(r[0], r[1], r[2]);
    let weights = if settings.oracle_weights {
        weight_tensor_from_probs(&sim.panel, &sim.propensities, design.k, est.truncation)
    } else {
        PropensityModel::fit(&sim.panel, &est.propensity)
            .and_then(|m| weight_tensor(&sim.panel, &m, design.k, est.truncation))
    };
    let weights = match weights {
        Ok(w) => w,
        Err(e) => {
            rows.extend(settings.methods.iter().map(|m| fail(&m.to_string(), &e)));
            return rows;
        }
    };
    let query = AteQuery::treat_all_vs_none(design.k).expect("k validated");
    for &method in &settings.methods {
        let name = method.to_string();
        let result = fit_method(&sim.panel, &weights, method, &est).and_then(|f| {
            let l2 = normalized_error(&f.y_hat, &sim.y_star)?;
            let a = ate(&f.y_hat, &query)?;
            Ok((l2, a))
        });
        match result {
            Ok((l2, a)) => {
                rows.push(row(&name, "l2_sq", l2));
                rows.push(row(&name, "ate", a));
                rows.push(row(&name, "ate_abs_err", (a - sim.true_ate).abs()));
            }
            Err(e) => rows.push(fail(&name, &e)),
        }
    }
    rows
}

/// Every `(design, rep, method)` of the grid. Reps run on worker threads but
/// rows come back in grid order, so the output is identical for any thread
/// count. Failed fits are recorded as `error` rows holding the exit code.
pub fn run_experiment(grid: &[SimDesign], settings: &ExperimentSettings) -> Result<Vec<MetricRow>> {
    if grid.is_empty() {
        return Err(Error::argument("experiment grid is empty"));
    }
    if settings.methods.is_empty() {
        return Err(Error::argument("no methods requested"));
    }
    for d in grid {
        d.validate()?;
    }
    let jobs: Vec<(usize, usize)> = grid.iter().enumerate().flat_map(|(g, d)| (0..d.reps).map(move |r| (g, r))).collect();
    let threads = if settings.threads == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        settings.threads
    }
    .min(jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Vec<MetricRow>>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                if j >= jobs.len() {
                    break;
                }
                let (g, rep) = jobs[j];
                let rows = run_rep(&grid[g], rep, settings);
                results.lock().expect("worker panicked")[j] = Some(rows);
            });
        }
    });
    Ok(results.into_inner().expect("worker panicked").into_iter().flatten().flatten().collect())
}
