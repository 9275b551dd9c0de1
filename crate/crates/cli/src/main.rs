use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use serde_json::{json, Map, Value};
use tmsm::error::Error;
use tmsm::estimands::Method;
use tmsm::pipeline::{
    manifest_config, merge_json, read_json, run_goal, run_simulate, Goal, PipelineConfig, SimulateConfig, StageError,
    BASELINE_FILE, LONGITUDINAL_FILE,
};
use tmsm::propensity::Penalty;
use tmsm::simbench::{Assignment, OutcomeModel};
use tmsm::tensor::MultilinearRank;

#[derive(Parser, Debug)]
#[command(name = "tmsm", version, about = "Counterfactual outcome tensors for sequential treatments")]
struct Cli {
    /// JSON config file; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Re-run the command recorded in a manifest.json.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, env = "TMSM_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic panel with its counterfactual truth.
    Simulate(SimulateArgs),
    /// Fit the per-time treatment models.
    FitPropensity(EstArgs),
    /// Fit one estimator and write the completed tensor.
    Complete(EstArgs),
    /// Select the multilinear rank by BIC.
    TuneRanks(EstArgs),
    /// Fit, then write training, truth and cross-validation metrics.
    Evaluate(EstArgs),
    /// Fit, then write the treat-all versus treat-none effect.
    Ate(EstArgs),
    /// Every stage end to end.
    Pipeline(EstArgs),
}

#[derive(Args, Debug, Default)]
struct SimulateArgs {
    /// Outcome model: M1, M2 or M2-gamma.
    #[arg(long)]
    design: Option<OutcomeModel>,
    /// Assignment: A1, A2, randomized, forced0 or forced1.
    #[arg(long)]
    assign: Option<Assignment>,
    #[arg(long)]
    gamma_sd: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    d0: Option<usize>,
    #[arg(long)]
    noise_sd: Option<f64>,
    #[arg(long, value_parser = ["shared", "per-slice"])]
    noise_mode: Option<String>,
    #[arg(long)]
    rep: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct EstArgs {
    /// Directory holding baseline.csv and longitudinal.csv.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    longitudinal: Option<PathBuf>,
    /// A simulate output directory, for oracle metrics and weights.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// co-tucker, tucker, co-unfold or hrmsm.
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    k: Option<usize>,
    /// Fixed rank r1,r2,r3; omitted means BIC tuning.
    #[arg(long)]
    rank: Option<MultilinearRank>,
    #[arg(long)]
    sweeps: Option<usize>,
    #[arg(long)]
    oracle_weights: bool,
    #[arg(long)]
    cv_folds: Option<usize>,
    #[arg(long)]
    truncation: Option<f64>,
    #[arg(long)]
    penalty: Option<Penalty>,
    #[arg(long)]
    sieve_order: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
}

fn put(map: &mut Map<String, Value>, path: &[&str], value: Value) {
    let (last, head) = path.split_last().expect("non-empty key path");
    let mut cur = map;
    for key in head {
        cur = cur
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Map::new()))
            .as_object_mut()
            .expect("flag paths only traverse objects");
    }
    cur.insert(last.to_string(), value);
}

fn opt<T: serde::Serialize>(map: &mut Map<String, Value>, path: &[&str], value: &Option<T>) {
    if let Some(v) = value {
        put(map, path, json!(v));
    }
}

fn simulate_patch(a: &SimulateArgs) -> Map<String, Value> {
    let mut m = Map::new();
    opt(&mut m, &["design", "outcome"], &a.design);
    opt(&mut m, &["design", "assignment"], &a.assign);
    opt(&mut m, &["design", "gamma_sd"], &a.gamma_sd);
    opt(&mut m, &["design", "n"], &a.n);
    opt(&mut m, &["design", "t"], &a.t);
    opt(&mut m, &["design", "k"], &a.k);
    opt(&mut m, &["design", "d0"], &a.d0);
    opt(&mut m, &["design", "noise_sd"], &a.noise_sd);
    opt(&mut m, &["design", "noise_mode"], &a.noise_mode);
    opt(&mut m, &["rep"], &a.rep);
    m
}

fn estimation_patch(a: &EstArgs) -> Map<String, Value> {
    let mut m = Map::new();
    if let Some(dir) = &a.data {
        put(&mut m, &["baseline"], json!(dir.join(BASELINE_FILE)));
        put(&mut m, &["longitudinal"], json!(dir.join(LONGITUDINAL_FILE)));
    }
    opt(&mut m, &["baseline"], &a.baseline);
    opt(&mut m, &["longitudinal"], &a.longitudinal);
    opt(&mut m, &["truth_dir"], &a.truth);
    opt(&mut m, &["method"], &a.method);
    opt(&mut m, &["estimation", "k"], &a.k);
    opt(&mut m, &["rank"], &a.rank);
    opt(&mut m, &["sweeps"], &a.sweeps);
    if a.oracle_weights {
        put(&mut m, &["oracle_weights"], json!(true));
    }
    opt(&mut m, &["cv_folds"], &a.cv_folds);
    opt(&mut m, &["estimation", "truncation"], &a.truncation);
    opt(&mut m, &["estimation", "propensity", "penalty"], &a.penalty);
    opt(&mut m, &["estimation", "sieve", "order"], &a.sieve_order);
    opt(&mut m, &["estimation", "fit", "max_iters"], &a.max_iters);
    m
}

/// defaults ← config file ← seed (flag or TMSM_SEED) ← flags.
fn resolve<T: serde::Serialize + serde::de::DeserializeOwned + Default>(
    base: Option<Value>,
    config: Option<&Path>,
    seed_path: &[&str],
    seed: Option<u64>,
    out: Option<&Path>,
    patch: Map<String, Value>,
) -> Result<T, Error> {
    let mut value = base.unwrap_or(serde_json::to_value(T::default())?);
    if let Some(path) = config {
        merge_json(&mut value, read_json(path)?);
    }
    let mut top = patch;
    if let Some(s) = seed {
        put(&mut top, seed_path, json!(s));
    }
    if let Some(dir) = out {
        put(&mut top, &["out_dir"], json!(dir));
    }
    merge_json(&mut value, Value::Object(top));
    Ok(serde_json::from_value(value)?)
}

enum Failure {
    Plain(Error),
    Stage(StageError),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Plain(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Plain(e.into())
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let recorded = match &cli.manifest {
        Some(path) => Some(manifest_config(path)?),
        None => None,
    };
    let (name, base) = match (&cli.command, recorded) {
        (Some(cmd), rec) => {
            let name = command_name(cmd);
            if let Some((recorded_name, _)) = &rec {
                if recorded_name != name {
                    return Err(Error::argument(format!("manifest records `{recorded_name}`, not `{name}`")).into());
                }
            }
            (name.to_string(), rec.map(|r| r.1))
        }
        (None, Some((name, config))) => (name, Some(config)),
        (None, None) => return Err(Error::argument("no command given; see --help").into()),
    };
    let config = cli.config.as_deref();
    let out = cli.out.as_deref();
    if name == "simulate" {
        let args = match &cli.command {
            Some(Command::Simulate(a)) => simulate_patch(a),
            _ => Map::new(),
        };
        let cfg: SimulateConfig = resolve(base, config, &["design", "seed"], cli.seed, out, args)?;
        run_simulate(&cfg)?;
        return Ok(());
    }
    let goal = Goal::from_command(&name).ok_or_else(|| Error::argument(format!("unknown command `{name}`")))?;
    let args = match &cli.command {
        Some(
            Command::FitPropensity(a)
            | Command::Complete(a)
            | Command::TuneRanks(a)
            | Command::Evaluate(a)
            | Command::Ate(a)
            | Command::Pipeline(a),
        ) => estimation_patch(a),
        _ => Map::new(),
    };
    let cfg: PipelineConfig = resolve(base, config, &["seed"], cli.seed, out, args)?;
    run_goal(&cfg, goal).map_err(Failure::Stage)?;
    Ok(())
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Simulate(_) => "simulate",
        Command::FitPropensity(_) => Goal::FitPropensity.command(),
        Command::Complete(_) => Goal::Complete.command(),
        Command::TuneRanks(_) => Goal::TuneRanks.command(),
        Command::Evaluate(_) => Goal::Evaluate.command(),
        Command::Ate(_) => Goal::Ate.command(),
        Command::Pipeline(_) => Goal::Pipeline.command(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Plain(e)) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(Failure::Stage(e)) => {
            error!("{e}");
            ExitCode::from(e.error.exit_code() as u8)
        }
    }
}
