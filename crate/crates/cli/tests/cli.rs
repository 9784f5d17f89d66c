use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn kmp() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_kmp"));
    for var in ["KMP_SEED", "KMP_DATA", "KMP_CONFIG", "KMP_OUT"] {
        c.env_remove(var);
    }
    c
}

fn write_fixture(dir: &Path, rows: usize) -> PathBuf {
    let path = dir.join("data.csv");
    let mut s = String::from("x,y\n");
    for i in 0..rows {
        let x = (i as f64 + 0.5) / rows as f64;
        // deterministic pseudo-noise
        let e = 0.05 * ((i * 7919 % 101) as f64 / 101.0 - 0.5);
        s.push_str(&format!("{x},{}\n", (6.0 * x).sin() + e));
    }
    std::fs::write(&path, s).unwrap();
    path
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"{"mcmc": {"burnin": 40, "samples": 40}, "k": 4, "grid_size": 25}"#;

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {text}"))
}

#[test]
fn fit_emits_chain_summary_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_fixture(dir.path(), 50);
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let o = kmp()
        .args(["fit", "--data"])
        .arg(&data)
        .arg("--config")
        .arg(&cfg)
        .args(["--seed", "7", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["chain.csv", "summary.csv", "summary.json", "manifest.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["k"], 4);
    assert_eq!(manifest["config"]["mcmc"]["seed"], 7);
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 26);
}

#[test]
fn same_seed_same_chain() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_fixture(dir.path(), 50);
    let cfg = write_config(dir.path(), SMALL);
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = kmp().arg("fit").arg("--data").arg(&data).arg("--config").arg(&cfg).args(["--seed", seed]).arg("--out").arg(&out).output().unwrap();
        assert!(o.status.success());
        std::fs::read(out.join("chain.csv")).unwrap()
    };
    assert_eq!(run("a", "3"), run("b", "3"));
    assert_ne!(run("a", "3"), run("c", "4"));
}

#[test]
fn seed_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_fixture(dir.path(), 30);
    let cfg = write_config(dir.path(), SMALL);
    let o = kmp()
        .arg("fit")
        .env("KMP_SEED", "11")
        .env("KMP_DATA", &data)
        .env("KMP_CONFIG", &cfg)
        .env("KMP_OUT", dir.path().join("env"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("env/chain.csv").is_file());
}

#[test]
fn select_k_emits_one_row_per_k() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_fixture(dir.path(), 50);
    let cfg = write_config(dir.path(), r#"{"mcmc": {"burnin": 30, "samples": 30}, "grid_size": 20}"#);
    let out = dir.path().join("sel");
    let o = kmp()
        .arg("select-k")
        .arg("--data")
        .arg(&data)
        .arg("--config")
        .arg(&cfg)
        .args(["--seed", "1", "--k-min", "6", "--k-max", "8", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("dic.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    let ks: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ks, ["6", "7", "8"]);
}

#[test]
fn missing_seed_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_fixture(dir.path(), 10);
    let o = kmp().arg("fit").arg("--data").arg(&data).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"]["kind"], "usage");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = kmp().args(["fit", "--frobnicate"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"]["kind"], "usage");
}

#[test]
fn bad_cell_names_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "x,y\n0.1,1.0\n0.2,NA\n").unwrap();
    let o = kmp().arg("fit").arg("--data").arg(&data).args(["--seed", "1", "--out"]).arg(dir.path().join("o")).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let e = error_json(&o);
    assert_eq!(e["error"]["kind"], "data");
    let msg = e["error"]["message"].as_str().unwrap();
    assert!(msg.contains("row 3") && msg.contains("'y'") && msg.contains("NA"), "{msg}");
}

#[test]
fn unreadable_file_and_bad_config_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = kmp().args(["fit", "--data", "/nonexistent/data.csv", "--seed", "1", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(matches!(error_json(&o)["error"]["kind"].as_str(), Some("io") | Some("csv")));

    let data = write_fixture(dir.path(), 10);
    let cfg = write_config(dir.path(), r#"{"mcmc": {"burnin": 1}, "bogus": true}"#);
    let o = kmp().arg("fit").arg("--data").arg(&data).arg("--config").arg(&cfg).args(["--seed", "1", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"]["kind"], "json");
}

#[test]
fn predict_from_saved_chain() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_fixture(dir.path(), 40);
    let cfg = write_config(dir.path(), SMALL);
    let fit_out = dir.path().join("fit");
    assert!(kmp().arg("fit").arg("--data").arg(&data).arg("--config").arg(&cfg).args(["--seed", "2", "--out"]).arg(&fit_out).status().unwrap().success());
    let newx = dir.path().join("new.csv");
    std::fs::write(&newx, "x\n0.25\n0.5\n0.75\n").unwrap();
    let out = dir.path().join("pred");
    let o = kmp().arg("predict").arg("--chain").arg(fit_out.join("chain.csv")).arg("--data").arg(&newx).arg("--out").arg(&out).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pred = std::fs::read_to_string(out.join("prediction.csv")).unwrap();
    assert_eq!(pred.lines().count(), 4);
    for line in pred.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!(v[2] <= v[1] && v[1] <= v[3]);
    }
}

#[test]
fn fixed_and_sieve_commands() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_fixture(dir.path(), 60);
    for (cmd, cfg) in [("fit-fixed", r#"{"draws": 50, "grid_size": 10}"#), ("sieve-mle", r#"{"sieve": {"k": 3, "multistart": 2}, "grid_size": 10}"#)] {
        let cfg = write_config(dir.path(), cfg);
        let out = dir.path().join(cmd);
        let o = kmp().arg(cmd).arg("--data").arg(&data).arg("--config").arg(&cfg).args(["--seed", "5", "--out"]).arg(&out).output().unwrap();
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join("summary.csv").is_file() && out.join("summary.json").is_file() && out.join("manifest.json").is_file());
    }
    assert!(dir.path().join("fit-fixed/chain.csv").is_file());
}

#[test]
fn wage_fixture_through_fit_plm() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wage.csv");
    let mut s = String::from("wage,lwage,female,married,educ,tenure,exper\n");
    for i in 0..40 {
        let female = if i % 3 == 0 { "yes" } else { "no" };
        let married = if i % 2 == 0 { "1" } else { "0" };
        let exper = (i * 13 % 37) as f64;
        s.push_str(&format!("0,{},{female},{married},{},{},{exper}\n", 1.0 + 0.01 * i as f64, 10 + i % 7, i % 5));
    }
    std::fs::write(&path, s).unwrap();
    let cfg = write_config(dir.path(), r#"{"mcmc": {"burnin": 30, "samples": 30}, "k": 3, "grid_size": 10}"#);
    let out = dir.path().join("plm");
    let o = kmp()
        .arg("fit-plm")
        .arg("--data")
        .arg(&path)
        .arg("--wage")
        .args(["--split-seed", "1"])
        .arg("--config")
        .arg(&cfg)
        .args(["--seed", "3", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let names: Vec<&str> = summary["beta"].as_array().unwrap().iter().map(|b| b["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["female", "married", "educ", "tenure"]);
}

#[test]
fn coverage_and_benchmark_from_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"truth": {"kind": "sine"}, "n": 60, "noise_sd": 0.2, "replicates": 2, "base_seed": 0,
            "estimators": [{"estimator": "kmp", "k": 4}, {"estimator": "oracle"}],
            "grid_size": 20, "windows": [[0.3, 0.35]], "mcmc": {"burnin": 30, "samples": 30}}"#,
    );
    for cmd in ["coverage", "benchmark"] {
        let out = dir.path().join(cmd);
        let o = kmp().arg(cmd).arg("--config").arg(&cfg).args(["--seed", "9", "--out"]).arg(&out).output().unwrap();
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join(format!("{cmd}.json")).is_file() && out.join(format!("{cmd}.csv")).is_file());
        let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["config"]["base_seed"], 9);
    }
}
