use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn fedho(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedho"));
    cmd.args(args);
    for key in ["FEDHO_CONFIG", "FEDHO_SEED", "FEDHO_OUT", "FEDHO_MODE", "FEDHO_MODEL"] {
        cmd.env_remove(key);
    }
    cmd.envs(envs.iter().copied());
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes a config whose output directory is `dir` itself.
fn config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    let text = format!("[run]\nseed = 5\noutput_dir = {:?}\n{body}", dir.to_str().unwrap());
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn ok(out: &Output) {
    assert_eq!(code(out), 0, "stderr: {}", stderr(out));
}

const SMALL: &str = "[dataset]\ntest_size = 2000\n[train]\nepochs = 5\n[fl]\nrounds = 10\n[online]\ntest_size = 1000\n[online.fl]\nrounds = 3\n[policy]\ntraces_per_scenario = 40\n";

#[test]
fn default_generate_reports_full_test_set() {
    let dir = TempDir::new().unwrap();
    let out = fedho(&["generate", "--out", dir.path().to_str().unwrap()], &[]);
    ok(&out);
    let m = manifest(dir.path());
    let gen = &m["runs"]["generate"];
    assert_eq!(gen["test"]["samples"], 24_000);
    assert_eq!(gen["test"]["group_1"], 12_000);
    assert_eq!(gen["test"]["group_2"], 12_000);
    assert_eq!(gen["train"]["samples"], 1_400);
    assert_eq!(csv_rows(&dir.path().join("test.csv")).len(), 24_000);
}

#[test]
fn same_seed_gives_identical_files() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let cfg_a = config(a.path(), SMALL);
    let cfg_b = config(b.path(), SMALL);
    ok(&fedho(&["generate", "--config", &cfg_a], &[]));
    ok(&fedho(&["generate", "--config", &cfg_b], &[]));
    for name in ["train.csv", "test.csv", "topology.json", "manifest.json"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between identical runs");
    }
    let c = TempDir::new().unwrap();
    let cfg_c = config(c.path(), SMALL);
    ok(&fedho(&["generate", "--config", &cfg_c, "--seed", "6"], &[]));
    assert_ne!(manifest(a.path())["files"]["train.csv"]["sha256"], manifest(c.path())["files"]["train.csv"]["sha256"]);
}

#[test]
fn config_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[fl]\nrounds = 3\n").unwrap();
    let out = fedho(&["generate", "--config", path.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("[run]"), "{}", stderr(&out));

    std::fs::write(&path, "[run]\n[fl]\nrounds = 3\nparticipaton = 0.2\n").unwrap();
    let out = fedho(&["generate", "--config", path.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("participaton"), "{}", stderr(&out));

    let out = fedho(&["train", "--mode", "federated"], &[]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_inputs_exit_three() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = fedho(&["train", "--config", &cfg], &[]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("train.csv"));
    ok(&fedho(&["generate", "--config", &cfg], &[]));
    let out = fedho(&["train", "--config", &cfg, "--mode", "fl_online"], &[]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("offline_model.json"), "{}", stderr(&out));
    assert_eq!(code(&fedho(&["evaluate", "--config", &cfg], &[])), 3);
    assert_eq!(code(&fedho(&["report", "--config", &cfg], &[])), 3);
    let out = fedho(&["generate", "--config", dir.path().join("absent.toml").to_str().unwrap()], &[]);
    assert_eq!(code(&out), 3);
}

#[test]
fn non_finite_training_exits_four() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), SMALL);
    ok(&fedho(&["generate", "--config", &cfg], &[]));
    let path = dir.path().join("train.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut fields: Vec<&str> = lines[1].split(',').collect();
    fields[1] = "NaN";
    lines[1] = fields.join(",");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let out = fedho(&["train", "--config", &cfg], &[]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn default_centralized_curve_has_one_row_per_epoch() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "[dataset]\ntest_size = 2000\n");
    ok(&fedho(&["generate", "--config", &cfg], &[]));
    ok(&fedho(&["train", "--config", &cfg], &[]));
    let rows = csv_rows(&dir.path().join("centralized_curve.csv"));
    assert_eq!(rows.len(), 2000);
    assert_eq!(rows[0][0], "1");
    assert_eq!(rows[1999][0], "2000");
    assert!(dir.path().join("centralized_model.bin").exists());
}

#[test]
fn full_pipeline() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), SMALL);
    ok(&fedho(&["generate", "--config", &cfg], &[]));
    ok(&fedho(&["train", "--config", &cfg, "--mode", "fl_offline"], &[]));
    assert_eq!(csv_rows(&dir.path().join("offline_curve.csv")).len(), 10);
    ok(&fedho(&["train", "--config", &cfg], &[("FEDHO_MODE", "fl_online")]));
    assert_eq!(csv_rows(&dir.path().join("online_curve.csv")).len(), 3);

    ok(&fedho(&["evaluate", "--config", &cfg], &[]));
    let summary = csv_rows(&dir.path().join("summary.csv"));
    assert_eq!(summary.len(), 8);
    for scenario in ["15-20", "20-25"] {
        let policies: Vec<&str> = summary.iter().filter(|r| r[1] == scenario).map(|r| r[0].as_str()).collect();
        assert_eq!(policies, ["reactive_no_ttt", "reactive_ttt", "proactive_model", "proactive_perfect"]);
    }
    assert_eq!(csv_rows(&dir.path().join("metrics.csv")).len(), 8 * 40);
    let comm: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("comm_cost.json")).unwrap()).unwrap();
    assert!((comm["centralized"]["rate_kbps"].as_f64().unwrap() - 1.28).abs() < 1e-9);
    assert!((comm["federated"]["total_kbits"].as_f64().unwrap() - 10.688).abs() < 1e-9);
    assert!((comm["federated"]["rate_kbps"].as_f64().unwrap() - 0.27).abs() < 0.005);

    // Evaluating the centralized checkpoint from its raw form also works.
    ok(&fedho(&["train", "--config", &cfg], &[]));
    let bin = dir.path().join("centralized_model.bin");
    ok(&fedho(&["evaluate", "--config", &cfg, "--model", bin.to_str().unwrap()], &[]));

    ok(&fedho(&["report", "--config", &cfg], &[]));
    let report = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(report.contains("proactive_perfect") && report.contains("1.2800"));

    let m = manifest(dir.path());
    let files = m["files"].as_object().unwrap();
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name == "manifest.json" || name == "run.toml" {
            continue;
        }
        let e = files.get(&name).unwrap_or_else(|| panic!("{name} missing from manifest"));
        assert_eq!(e["seed"], 5);
        assert_eq!(e["config_sha256"].as_str().unwrap().len(), 64);
    }
}

#[test]
fn environment_overrides_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), SMALL);
    ok(&fedho(&["generate"], &[("FEDHO_CONFIG", &cfg), ("FEDHO_SEED", "11")]));
    assert_eq!(manifest(dir.path())["files"]["test.csv"]["seed"], 11);
}

#[test]
fn incompatible_model_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), SMALL);
    ok(&fedho(&["generate", "--config", &cfg], &[]));
    let model = dir.path().join("offline_model.json");
    std::fs::write(&model, "{\"dims\": [2, 2], \"values\": [0, 0, 0, 0, 0, 0], \"input_mean\": [0, 0], \"input_std\": [1, 1]}").unwrap();
    let out = fedho(&["evaluate", "--config", &cfg], &[]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("incompatible"));
}
