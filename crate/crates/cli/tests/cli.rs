use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tmsm::estimands::{fit_method, EstimationSettings, Method};
use tmsm::metrics::read_metrics;
use tmsm::panel::PanelDataset;
use tmsm::propensity::WeightTensor;
use tmsm::simbench::{generate, SimDesign};
use tmsm::tensor::Tensor3;

fn tmsm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmsm"))
        .current_dir(dir)
        .env_remove("TMSM_SEED")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = tmsm(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

const SIM: [&str; 13] = ["simulate", "--design", "M1", "--assign", "A1", "--n", "60", "--t", "6", "--k", "3", "--seed", "3"];

fn simulate(dir: &Path, name: &str) {
    let mut args = SIM.to_vec();
    args.extend(["--out", name]);
    ok(dir, &args);
}

#[test]
fn simulate_writes_four_files() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["simulate", "--design", "M1", "--assign", "A1", "--n", "100", "--t", "10", "--k", "5", "--seed", "1", "--out", "sim"]);
    let mut names: Vec<String> =
        fs::read_dir(dir.path().join("sim")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["baseline.csv", "longitudinal.csv", "truth.json", "y_star.tnsr"]);
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "a");
    simulate(dir.path(), "b");
    for f in ["baseline.csv", "longitudinal.csv", "truth.json", "y_star.tnsr"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        if f == "truth.json" {
            // The echoed config differs only in out_dir.
            let mut va: serde_json::Value = serde_json::from_slice(&a).unwrap();
            let mut vb: serde_json::Value = serde_json::from_slice(&b).unwrap();
            va["config"]["out_dir"] = serde_json::Value::Null;
            vb["config"]["out_dir"] = serde_json::Value::Null;
            assert_eq!(va, vb);
        } else {
            assert_eq!(a, b, "{f}");
        }
    }
}

#[test]
fn history_longer_than_panel_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = tmsm(dir.path(), &["simulate", "--k", "20", "--t", "10", "--out", "bad"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("k = 20"));
}

#[test]
fn pipeline_metrics_have_l2_and_ate_rows() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "sim");
    ok(dir.path(), &["pipeline", "--data", "sim", "--truth", "sim", "--k", "3", "--rank", "2,1,4", "--out", "out"]);
    let rows = read_metrics(&dir.path().join("out/metrics.csv")).unwrap();
    for metric in ["l2_sq", "ate", "ate_abs_err", "l2"] {
        assert!(rows.iter().any(|r| r.metric == metric && r.method == "co-tucker"), "{metric}");
    }
    for f in ["manifest.json", "report.json", "y_hat.tnsr", "propensity.csv", "fit.json", "model"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }
}

#[test]
fn methods_label_their_metrics() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "sim");
    for m in ["hrmsm", "co-tucker"] {
        ok(dir.path(), &["pipeline", "--data", "sim", "--truth", "sim", "--k", "3", "--rank", "2,1,4", "--method", m, "--out", m]);
        let rows = read_metrics(&dir.path().join(m).join("metrics.csv")).unwrap();
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| r.method == m));
    }
    let a = fs::read(dir.path().join("hrmsm/y_hat.tnsr")).unwrap();
    let b = fs::read(dir.path().join("co-tucker/y_hat.tnsr")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn oracle_weights_bypass_propensity_fitting() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "sim");
    let base = ["complete", "--data", "sim", "--truth", "sim", "--k", "3", "--method", "hrmsm"];
    let mut args = base.to_vec();
    args.extend(["--oracle-weights", "--out", "oracle"]);
    ok(dir.path(), &args);
    let mut args = base.to_vec();
    args.extend(["--out", "fitted"]);
    ok(dir.path(), &args);
    assert!(!dir.path().join("oracle/propensity.csv").exists());
    assert!(dir.path().join("fitted/propensity.csv").exists());

    // Weights from the generator's probabilities, built directly.
    let k = 3;
    let design = SimDesign { n: 60, t: 6, k, seed: 3, ..SimDesign::default() };
    let sim = generate(&design, 0).unwrap();
    let data = PanelDataset::load_csv(&dir.path().join("sim/baseline.csv"), &dir.path().join("sim/longitudinal.csv")).unwrap();
    let mut w = Tensor3::zeros(60, 6, 1 << k);
    for i in 0..60 {
        for t in 1..=6usize {
            let mut prod = 1.0;
            for j in t.saturating_sub(k - 1).max(1)..=t {
                let p = sim.propensities[(i, j - 1)].clamp(1e-6, 1.0 - 1e-6);
                prod *= if data.treatments()[i][j - 1] == 1 { p } else { 1.0 - p };
            }
            w.set(i, t - 1, data.observed_regime(i, t, k), 1.0 / prod);
        }
    }
    let weights = WeightTensor { w, truncation: None, clamped: 0 };
    let est = EstimationSettings { k, ..EstimationSettings::default() };
    let direct = fit_method(&data, &weights, Method::Hrmsm, &est).unwrap().y_hat;
    let oracle = Tensor3::read_from(&dir.path().join("oracle/y_hat.tnsr")).unwrap();
    let fitted = Tensor3::read_from(&dir.path().join("fitted/y_hat.tnsr")).unwrap();
    let scale = direct.frobenius_norm();
    assert!(oracle.max_abs_diff(&direct) <= 1e-9 * scale);
    assert!(fitted.max_abs_diff(&direct) > 1e-6 * scale);
}

#[test]
fn manifest_rerun_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "sim");
    ok(dir.path(), &["pipeline", "--data", "sim", "--truth", "sim", "--k", "3", "--cv-folds", "2", "--rank", "2,1,4", "--out", "first"]);
    ok(dir.path(), &["--manifest", "first/manifest.json", "--out", "second"]);
    for f in ["metrics.csv", "report.json", "y_hat.tnsr", "propensity.csv"] {
        let a = fs::read(dir.path().join("first").join(f)).unwrap();
        let b = fs::read(dir.path().join("second").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let out = tmsm(dir.path(), &["simulate", "--manifest", "first/manifest.json", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

fn echoed_design(dir: &Path, name: &str) -> serde_json::Value {
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.join(name).join("truth.json")).unwrap()).unwrap();
    v["config"]["design"].clone()
}

#[test]
fn flags_override_seed_env_over_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), r#"{"design": {"n": 30, "t": 5, "k": 2, "seed": 11}}"#).unwrap();
    ok(dir.path(), &["--config", "cfg.json", "simulate", "--out", "c"]);
    let d = echoed_design(dir.path(), "c");
    assert_eq!((d["n"].as_u64(), d["t"].as_u64(), d["seed"].as_u64()), (Some(30), Some(5), Some(11)));

    ok(dir.path(), &["--config", "cfg.json", "simulate", "--n", "40", "--out", "f"]);
    assert_eq!(echoed_design(dir.path(), "f")["n"].as_u64(), Some(40));

    let run = |seed_flag: Option<&str>, out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_tmsm"));
        cmd.current_dir(dir.path()).env("TMSM_SEED", "77").args(["--config", "cfg.json", "simulate", "--out", out]);
        if let Some(s) = seed_flag {
            cmd.args(["--seed", s]);
        }
        assert!(cmd.output().unwrap().status.success());
    };
    run(None, "e");
    assert_eq!(echoed_design(dir.path(), "e")["seed"].as_u64(), Some(77));
    run(Some("5"), "s");
    assert_eq!(echoed_design(dir.path(), "s")["seed"].as_u64(), Some(5));
}

#[test]
fn every_command_writes_its_outputs() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "sim");
    let cases: [(&str, &[&str]); 5] = [
        ("fit-propensity", &["propensity.csv"]),
        ("tune-ranks", &["bic.csv", "rank.json"]),
        ("complete", &["y_hat.tnsr", "fit.json", "model"]),
        ("ate", &["ate.json"]),
        ("evaluate", &["metrics.csv"]),
    ];
    for (cmd, files) in cases {
        let mut args = vec![cmd, "--data", "sim", "--truth", "sim", "--k", "3", "--max-iters", "50", "--out", cmd];
        if cmd != "tune-ranks" {
            args.extend(["--rank", "2,1,4"]);
        }
        ok(dir.path(), &args);
        let (command, _) = tmsm::pipeline::manifest_config(&dir.path().join(cmd).join("manifest.json")).unwrap();
        assert_eq!(command, cmd);
        for f in files {
            assert!(dir.path().join(cmd).join(f).exists(), "{cmd}: {f}");
        }
    }
    assert!(!dir.path().join("evaluate/report.json").exists());
}

#[test]
fn failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = tmsm(dir.path(), &["pipeline", "--data", "missing", "--out", "o"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage load"));
    let out = tmsm(dir.path(), &["pipeline", "--oracle-weights", "--data", "missing", "--out", "o"]);
    assert_ne!(out.status.code(), Some(0));
    simulate(dir.path(), "sim");
    let out = tmsm(dir.path(), &["pipeline", "--data", "sim", "--oracle-weights", "--k", "3", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage propensity"));
}
