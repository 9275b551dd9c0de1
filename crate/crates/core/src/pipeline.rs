//! File-level workflows behind the command-line front end: simulation
//! output, the end-to-end pipeline and run manifests.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::completion::{tune_ranks, FitReport, RankGrids};
use crate::error::{Error, Result};
use crate::estimands::{ate, cv_evaluate, fit_method, l2_cv, normalized_error, sieve_for, AteQuery, CvPlan, EstimationSettings, Method};
use crate::linalg::Matrix;
use crate::metrics::{write_metrics, MetricRow};
use crate::panel::{observation_tensor, PanelDataset};
use crate::propensity::{weight_tensor, weight_tensor_from_probs, PropensityModel, WeightTensor};
use crate::simbench::{generate, SimData, SimDesign};
use crate::tensor::{MultilinearRank, Tensor3};

pub const BASELINE_FILE: &str = "baseline.csv";
pub const LONGITUDINAL_FILE: &str = "longitudinal.csv";
pub const Y_STAR_FILE: &str = "y_star.tnsr";
pub const TRUTH_FILE: &str = "truth.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Recursively overlays `patch` onto `base`; objects merge key by key,
/// anything else replaces.
pub fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `{"command": …, "version": …, "config": …}` written next to every output.
pub fn write_manifest(dir: &Path, command: &str, config: &impl Serialize) -> Result<()> {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
    });
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub design: SimDesign,
    pub rep: usize,
    pub out_dir: PathBuf,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { design: SimDesign::default(), rep: 0, out_dir: PathBuf::from("sim") }
    }
}

/// Writes the panel CSVs, the counterfactual tensor and `truth.json`, which
/// also echoes the resolved configuration.
pub fn run_simulate(config: &SimulateConfig) -> Result<SimData> {
    let sim = generate(&config.design, config.rep)?;
    let dir = &config.out_dir;
    ensure_dir(dir)?;
    sim.panel.write_csv(&dir.join(BASELINE_FILE), &dir.join(LONGITUDINAL_FILE))?;
    sim.y_star.write_to(&dir.join(Y_STAR_FILE))?;
    let props: Vec<Vec<f64>> = (0..sim.propensities.rows()).map(|i| sim.propensities.row(i).to_vec()).collect();
    let truth = json!({
        "command": "simulate",
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "true_ate": sim.true_ate,
        "propensities": props,
    });
    write_json(&dir.join(TRUTH_FILE), &truth)?;
    info!("simulate: wrote {} subjects × {} times to {}", config.design.n, config.design.t, dir.display());
    Ok(sim)
}

/// Ground truth read back from a simulation directory.
#[derive(Debug, Clone)]
pub struct Truth {
    pub y_star: Tensor3,
    pub true_ate: f64,
    pub propensities: Matrix,
}

pub fn read_truth(dir: &Path) -> Result<Truth> {
    let path = dir.join(TRUTH_FILE);
    let v = read_json(&path)?;
    let true_ate = v["true_ate"].as_f64().ok_or_else(|| Error::parse(&path, 0, "missing true_ate"))?;
    let rows: Vec<Vec<f64>> = serde_json::from_value(v["propensities"].clone())?;
    let propensities = Matrix::from_rows(&rows)?;
    let y_star = Tensor3::read_from(&dir.join(Y_STAR_FILE))?;
    Ok(Truth { y_star, true_ate, propensities })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub baseline: PathBuf,
    pub longitudinal: PathBuf,
    /// A `simulate` output directory; enables oracle metrics and weights.
    pub truth_dir: Option<PathBuf>,
    pub method: Method,
    pub estimation: EstimationSettings,
    /// Fixed multilinear rank; `None` tunes it by BIC.
    pub rank: Option<MultilinearRank>,
    pub grids: RankGrids,
    pub sweeps: usize,
    /// Use the generator's propensities from `truth_dir`.
    pub oracle_weights: bool,
    pub cv_folds: Option<usize>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            baseline: PathBuf::from(BASELINE_FILE),
            longitudinal: PathBuf::from(LONGITUDINAL_FILE),
            truth_dir: None,
            method: Method::CoTucker,
            estimation: EstimationSettings::default(),
            rank: None,
            grids: RankGrids::default(),
            sweeps: 1,
            oracle_weights: false,
            cv_folds: None,
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// A failure tagged with the pipeline stage it happened in.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

trait Stage<T> {
    fn stage(self, name: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, name: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage: name, error })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub method: Method,
    pub rank: Option<MultilinearRank>,
    pub ate: f64,
    pub train_l2: f64,
    pub l2_sq: Option<f64>,
    pub true_ate: Option<f64>,
    pub fit: Option<FitReport>,
}

/// Weights from fitted treatment models, or from the generator when
/// `oracle` is set and a truth directory is given.
pub fn pipeline_weights(data: &PanelDataset, config: &PipelineConfig, truth: Option<&Truth>) -> Result<(WeightTensor, Option<PropensityModel>)> {
    let est = &config.estimation;
    if config.oracle_weights {
        let truth = truth.ok_or_else(|| Error::argument("oracle weights need a truth directory"))?;
        Ok((weight_tensor_from_probs(data, &truth.propensities, est.k, est.truncation)?, None))
    } else {
        let model = PropensityModel::fit(data, &est.propensity)?;
        let w = weight_tensor(data, &model, est.k, est.truncation)?;
        Ok((w, Some(model)))
    }
}

/// How far along the chain a command runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Goal {
    FitPropensity,
    TuneRanks,
    Complete,
    Ate,
    Evaluate,
    Pipeline,
}

impl Goal {
    pub const ALL: [Goal; 6] = [Goal::FitPropensity, Goal::TuneRanks, Goal::Complete, Goal::Ate, Goal::Evaluate, Goal::Pipeline];

    pub fn command(self) -> &'static str {
        match self {
            Goal::FitPropensity => "fit-propensity",
            Goal::TuneRanks => "tune-ranks",
            Goal::Complete => "complete",
            Goal::Ate => "ate",
            Goal::Evaluate => "evaluate",
            Goal::Pipeline => "pipeline",
        }
    }

    pub fn from_command(name: &str) -> Option<Goal> {
        Goal::ALL.into_iter().find(|g| g.command() == name)
    }
}

/// propensity → weights → rank tuning → fit → evaluation → ATE, writing
/// `manifest.json`, `report.json`, `metrics.csv`, `y_hat.tnsr` and, for the
/// tensor methods, a `model/` directory.
pub fn run_pipeline(config: &PipelineConfig) -> std::result::Result<PipelineReport, StageError> {
    run_goal(config, Goal::Pipeline).map(|r| r.expect("the full chain always reports"))
}

/// Runs the stages needed for `goal`. Only the `evaluate` and `pipeline`
/// goals produce a report.
///
/// * `fit-propensity` writes `propensity.csv`.
/// * `tune-ranks` always tunes and writes `bic.csv` and `rank.json`.
/// * `complete` writes `y_hat.tnsr`, `model/` and `fit.json`.
/// * `ate` also writes `ate.json`.
/// * `evaluate` also writes `metrics.csv`; `pipeline` adds `report.json`.
pub fn run_goal(config: &PipelineConfig, goal: Goal) -> std::result::Result<Option<PipelineReport>, StageError> {
    let out = &config.out_dir;
    ensure_dir(out).stage("setup")?;
    write_manifest(out, goal.command(), config).stage("setup")?;
    let mut est = config.estimation.clone();
    est.fit.seed = config.seed;

    let data = PanelDataset::load_csv(&config.baseline, &config.longitudinal).stage("load")?;
    let truth = config.truth_dir.as_deref().map(read_truth).transpose().stage("load")?;

    let (weights, model) = pipeline_weights(&data, config, truth.as_ref()).stage("propensity")?;
    if let Some(m) = &model {
        m.write_csv(&out.join("propensity.csv")).stage("propensity")?;
    }
    if goal == Goal::FitPropensity {
        info!("fit-propensity: wrote {}", out.display());
        return Ok(None);
    }

    let tensor_method = matches!(config.method, Method::CoTucker | Method::Tucker);
    let rank = match config.rank {
        Some(r) if goal != Goal::TuneRanks => r,
        _ if tensor_method => {
            let (omega, y_obs) = observation_tensor(&data, est.k).stage("tune-ranks")?;
            let proj = if config.method == Method::CoTucker {
                Some(sieve_for(data.baseline(), est.sieve).stage("tune-ranks")?.1)
            } else {
                None
            };
            let tuned = tune_ranks(&y_obs, &omega, &weights.w, proj.as_ref(), &config.grids, &est.fit, config.sweeps)
                .stage("tune-ranks")?;
            let rows: Vec<MetricRow> = tuned
                .table
                .iter()
                .map(|r| MetricRow::new("bic", &format!("{}", MultilinearRank::new(r.r1, r.r2, r.r3)), "train", "bic", r.bic))
                .collect();
            write_metrics(&out.join("bic.csv"), &rows).stage("tune-ranks")?;
            tuned.rank
        }
        Some(r) => r,
        None => est.fit.rank,
    };
    if goal == Goal::TuneRanks {
        write_json(&out.join("rank.json"), &json!({ "method": config.method, "rank": rank })).stage("tune-ranks")?;
        info!("tune-ranks: selected {rank}");
        return Ok(None);
    }
    est.fit.rank = rank;

    let fitted = fit_method(&data, &weights, config.method, &est).stage("fit")?;
    fitted.y_hat.write_to(&out.join("y_hat.tnsr")).stage("fit")?;
    if let Some(model) = &fitted.model {
        let extra = json!({ "method": config.method, "sieve": fitted.basis });
        model.save(&out.join("model"), extra).stage("fit")?;
    }
    write_json(&out.join("fit.json"), &json!({ "method": config.method, "report": fitted.report })).stage("fit")?;
    if goal == Goal::Complete {
        info!("complete: wrote {}", out.display());
        return Ok(None);
    }

    let method = config.method.to_string();
    let query = AteQuery::treat_all_vs_none(est.k).stage("ate")?;
    let ate_hat = ate(&fitted.y_hat, &query).stage("ate")?;
    if goal == Goal::Ate {
        let value = json!({
            "method": config.method,
            "regime_a": query.regime_a,
            "regime_b": query.regime_b,
            "ate": ate_hat,
            "true_ate": truth.as_ref().map(|t| t.true_ate),
        });
        write_json(&out.join("ate.json"), &value).stage("ate")?;
        info!("ate: {method} {ate_hat:.4}");
        return Ok(None);
    }

    let (omega, y_obs) = observation_tensor(&data, est.k).stage("evaluate")?;
    let train_l2 = l2_cv(&fitted.y_hat, &y_obs, &omega).stage("evaluate")?;
    let mut rows = vec![
        MetricRow::new("pipeline", &method, "train", "l2", train_l2),
        MetricRow::new("pipeline", &method, "train", "ate", ate_hat),
    ];
    let mut l2_sq = None;
    if let Some(t) = &truth {
        let e = normalized_error(&fitted.y_hat, &t.y_star).stage("evaluate")?;
        l2_sq = Some(e);
        rows.push(MetricRow::new("pipeline", &method, "full", "l2_sq", e));
        rows.push(MetricRow::new("pipeline", &method, "full", "ate_abs_err", (ate_hat - t.true_ate).abs()));
    }
    if let Some(v) = config.cv_folds {
        let plan = CvPlan::new(v, config.seed);
        for m in cv_evaluate(&data, &est, &plan, config.method).stage("evaluate")? {
            for (split, metric, value) in [
                ("train", "l2", m.train_l2),
                ("test", "l2", m.test_l2),
                ("train", "ate", m.train_ate),
                ("test", "ate", m.test_ate),
            ] {
                rows.push(MetricRow::new("cv", &method, split, metric, value).with_fold(v, m.fold));
            }
        }
    }
    write_metrics(&out.join("metrics.csv"), &rows).stage("evaluate")?;

    let report = PipelineReport {
        method: config.method,
        rank: if config.method == Method::Hrmsm { None } else { Some(rank) },
        ate: ate_hat,
        train_l2,
        l2_sq,
        true_ate: truth.as_ref().map(|t| t.true_ate),
        fit: fitted.report.clone(),
    };
    if goal == Goal::Pipeline {
        write_json(&out.join("report.json"), &report).stage("report")?;
    }
    info!("{}: {method} ate {ate_hat:.4} train l2 {train_l2:.4}", goal.command());
    Ok(Some(report))
}

/// The `config` object stored in a manifest.
pub fn manifest_config(path: &Path) -> Result<(String, Value)> {
    let v = read_json(path)?;
    let command = v["command"].as_str().ok_or_else(|| Error::parse(path, 0, "manifest has no command"))?.to_string();
    let config = v.get("config").cloned().ok_or_else(|| Error::parse(path, 0, "manifest has no config"))?;
    Ok((command, config))
}
