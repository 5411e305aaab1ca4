use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn rankpeer(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rankpeer"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RANKPEER_THREADS")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).expect("readable")).expect("valid json")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, body: &str) {
    fs::write(dir.join(name), body).expect("write fixture");
}

fn three_node(dir: &Path) {
    write(dir, "net.csv", "src,dst\n0,1\n0,2\n");
    write(dir, "coeffs.json", r#"{"dbar": 2, "beta": [0.0, 0.2, 0.3]}"#);
    write(dir, "intrinsic.csv", "node,intrinsic\n0,0\n1,1\n2,2\n");
}

#[test]
fn solve_reproduces_the_three_node_equilibrium() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    three_node(dir);
    let out = rankpeer(
        &["solve", "--network", "net.csv", "--coeffs", "coeffs.json", "--intrinsic", "intrinsic.csv", "--verify", "--out", "sol"],
        dir,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let mut rdr = csv::Reader::from_path(dir.join("sol/y.csv")).unwrap();
    let y: Vec<f64> = rdr.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
    assert_eq!(y.len(), 3);
    for (got, want) in y.iter().zip([0.8, 1.0, 2.0]) {
        assert!((got - want).abs() < 1e-12, "{y:?}");
    }
    let diag = json(&dir.join("sol/diagnostics.json"));
    assert!(diag.to_string().contains("iterations"), "{diag}");
    let manifest = json(&dir.join("sol/manifest.json"));
    assert_eq!(manifest["subcommand"], "solve");
    assert!(manifest["wall_time_seconds"].is_number());
}

#[test]
fn simulate_then_estimate_and_decompose() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write(dir, "coeffs.json", r#"{"dbar": 2, "beta": [0.3, 0.15, 0.4], "gamma": [1.0, 2.0]}"#);
    let out = rankpeer(
        &["simulate", "--n", "300", "--dbar", "2", "--threshold", "-3.5", "--seed", "7", "--coeffs", "coeffs.json", "--out", "sim"],
        dir,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["network.csv", "degrees.csv", "data.csv", "schema.json", "manifest.json"] {
        assert!(dir.join("sim").join(f).exists(), "missing {f}");
    }
    assert_eq!(json(&dir.join("sim/manifest.json"))["seed"], 7);

    let out = rankpeer(
        &["estimate", "--network", "sim/network.csv", "--data", "sim/data.csv", "--schema", "sim/schema.json", "--out", "est"],
        dir,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let result = json(&dir.join("est/result.json"));
    let text = result.to_string();
    assert!(text.contains("beta_1_2") && text.contains("first_stage_r2"), "{text}");
    assert!(fs::read_to_string(dir.join("est/estimates.csv")).unwrap().contains("beta_2_2"));

    let out = rankpeer(
        &[
            "misspec", "--network", "sim/network.csv", "--coeffs", "coeffs.json", "--target", "lim", "--reps", "200", "--seed", "3",
            "--out", "ms",
        ],
        dir,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let dec = json(&dir.join("ms/decomposition.json"));
    for key in ["estimand", "weights", "mc_se", "negative_weight_count"] {
        assert!(!dec[key].is_null(), "missing {key} in {dec}");
    }
    let total: f64 = dec["weights"].as_array().unwrap().iter().map(|w| w.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn mc_preset_is_reproducible_from_its_seed() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    for out_dir in ["a", "b"] {
        let out = rankpeer(&["mc", "--preset", "table1", "--reps", "6", "--seed", "42", "--out", out_dir], dir);
        assert!(out.status.success(), "{}", stderr(&out));
        assert!(String::from_utf8_lossy(&out.stdout).contains("PASS") || String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    }
    for f in ["summary.json", "table.txt", "table.csv", "checks.json", "manifest.json"] {
        assert!(dir.join("a").join(f).exists(), "missing {f}");
    }
    assert_eq!(
        fs::read(dir.join("a/summary.json")).unwrap(),
        fs::read(dir.join("b/summary.json")).unwrap()
    );
    assert_eq!(json(&dir.join("a/manifest.json"))["seed"], 42);
}

#[test]
fn check_flag_exit_code_follows_the_bands() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let out = rankpeer(&["mc", "--preset", "table1", "--reps", "4", "--seed", "1", "--check", "--out", "o"], dir);
    let checks = json(&dir.join("o/checks.json"));
    let any_fail = checks.as_array().unwrap().iter().any(|c| c["pass"] == false);
    assert_eq!(out.status.code(), Some(if any_fail { 1 } else { 0 }));
}

#[test]
fn wrong_triangular_length_exits_2() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    three_node(dir);
    write(dir, "bad.json", r#"{"dbar": 2, "beta": [0.3, 0.15]}"#);
    let out = rankpeer(&["solve", "--network", "net.csv", "--coeffs", "bad.json", "--intrinsic", "intrinsic.csv", "--out", "o"], dir);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("dbar(dbar+1)/2 = 3"), "{}", stderr(&out));
}

#[test]
fn missing_value_names_the_row() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write(dir, "net.csv", "src,dst\n0,1\n1,2\n2,0\n");
    write(dir, "data.csv", "id,y,x1\n0,1.0,0.5\n1,,0.2\n2,0.3,0.1\n");
    write(dir, "schema.json", r#"{"id": "id", "outcome": "y", "covariates": ["x1"], "instrument_source": "x1"}"#);
    let out = rankpeer(&["estimate", "--network", "net.csv", "--data", "data.csv", "--schema", "schema.json", "--out", "o"], dir);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("row") && msg.contains('y'), "{msg}");
}

#[test]
fn missing_file_and_unknown_flag_exit_2() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    three_node(dir);
    let out = rankpeer(&["solve", "--network", "nope.csv", "--coeffs", "coeffs.json", "--intrinsic", "intrinsic.csv", "--out", "o"], dir);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--network"), "{}", stderr(&out));

    let out = rankpeer(&["solve", "--bogus"], dir);
    assert_eq!(out.status.code(), Some(2));
}
