use std::fs;
use std::process::{Command, Output};

fn seasons(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seasons")).args(args).env_remove("SEASONS_OUTPUT_ROOT").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
conditions = ["far"]
gamma_grid = [0.5]
seeds = [4, 5]
"#;

#[test]
fn version_reports_code_and_schema() {
    let o = seasons(&["--version"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains(env!("CARGO_PKG_VERSION")));
    assert!(text.contains("config schema 1"), "{text}");
}

#[test]
fn unknown_flags_exit_with_usage_error() {
    assert_eq!(seasons(&["sweep", "--bogus"]).status.code(), Some(2));
    assert_eq!(seasons(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(seasons(&["run-cell", "--cell", "modular_far_x_s1"]).status.code(), Some(2));
}

#[test]
fn bad_config_is_a_diagnosed_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, "gamma_grid = [1.0, -1.0]\n").unwrap();
    let o = seasons(&["sweep", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gamma_grid"), "{}", stderr(&o));

    fs::write(&path, "typo_field = 3\n").unwrap();
    let o = seasons(&["sweep", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("typo_field"), "{}", stderr(&o));
}

#[test]
fn sweep_analyze_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("out");
    let o = seasons(&["sweep", "--config", cfg.to_str().unwrap(), "--output", out.to_str().unwrap(), "--workers", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let results = fs::read(out.join("results.csv")).unwrap();
    let aggregate = fs::read(out.join("aggregate.csv")).unwrap();
    assert!(out.join("config.toml").is_file());

    let o = seasons(&["analyze", "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(out.join("results.csv")).unwrap(), results);
    assert_eq!(fs::read(out.join("aggregate.csv")).unwrap(), aggregate);

    let o = seasons(&["export-pca", "--output", out.to_str().unwrap(), "--cell", "modular_far_g0.5_s5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["phases"].as_array().unwrap().len(), 3);

    let o = seasons(&["export-pca", "--output", out.to_str().unwrap(), "--cell", "modular_far_g0.5_s9"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn output_root_can_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_seasons"))
        .args(["run-cell", "--cell", "single_same_g2_s0"])
        .env("SEASONS_OUTPUT_ROOT", &target)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(target.join("cells/single_same_g2_s0/cell.json").is_file());
    let row: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(row["status"], "ok");
}

#[test]
fn default_config_round_trips() {
    let o = seasons(&["default-config"]);
    assert!(o.status.success());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, &o.stdout).unwrap();
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("schema_version = 1"));
    let parsed = seasons::SweepConfig::load(&path).unwrap();
    assert_eq!(parsed, seasons::SweepConfig::default());
}
