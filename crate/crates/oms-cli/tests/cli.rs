//! End-to-end tests of the `oms` binary: exit codes, stdout contracts, and
//! file outputs, driven through `std::process::Command`.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn oms(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oms"))
        .args(args)
        .output()
        .expect("spawn oms binary")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, body).expect("write config");
    path
}

const SMALL_CONFIG: &str = r#"
seed = 11
num_runs = 3
horizons = [200]

[scenario]
family = "neyman_allocation"

[[policies]]
type = "fixed"
target = [0.5, 0.5]

[[policies]]
type = "etc"
"#;

#[test]
fn test_oracle_neyman_closed_form() {
    let out = oms(&["oracle", "--scenario", "neyman"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("scenario = neyman_allocation"), "{text}");
    assert!(text.contains("kappa_star = (0.6667, 0.3333)"), "{text}");
    assert!(text.contains("V_star = 9.0000"), "{text}");
}

#[test]
fn test_oracle_params_and_kappa_probe() {
    // sigma1 = sigma0 makes the optimum the uniform split with V* = 4·sigma².
    let out = oms(&[
        "oracle",
        "--scenario",
        "neyman",
        "--sigma1",
        "1.0",
        "--sigma0",
        "1.0",
        "--kappa",
        "0.8,0.2",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("kappa_star = (0.5000, 0.5000)"), "{text}");
    assert!(text.contains("V_star = 4.0000"), "{text}");
    // V(0.8, 0.2) = 1/0.8 + 1/0.2 = 6.25.
    assert!(text.contains("V(0.8000, 0.2000) = 6.2500"), "{text}");
}

#[test]
fn test_oracle_cost_weighted_two_confounders() {
    let out = oms(&[
        "oracle",
        "--scenario",
        "two_conf",
        "--cost-weighted",
        "--mc-samples",
        "150000",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("kappa_star = (0.4000, 0.6000)"), "{text}");
    assert!(text.contains("cost_weighted_objective = "), "{text}");
}

#[test]
fn test_oracle_unknown_scenario_exits_one() {
    let out = oms(&["oracle", "--scenario", "nonesuch"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("unknown scenario"), "{}", stderr(&out));
}

#[test]
fn test_run_writes_metrics_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL_CONFIG);
    let out_dir = dir.path().join("out");
    let out = oms(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--jobs",
        "2",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("policy=fixed"), "{text}");
    assert!(text.contains("policy=etc"), "{text}");

    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).expect("metrics.csv");
    assert!(metrics.starts_with("policy,scenario,horizon_kind,horizon"));
    // Two policies × one horizon.
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    let run_files = fs::read_dir(out_dir.join("runs")).unwrap().count();
    // 2 cells × 3 runs each, oracle baselines not persisted.
    assert_eq!(run_files, 6);
}

#[test]
fn test_run_seed_override_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL_CONFIG);
    let base = oms(&["run", "--config", config.to_str().unwrap()]);
    let same = oms(&["run", "--config", config.to_str().unwrap(), "--seed", "11"]);
    let other = oms(&["run", "--config", config.to_str().unwrap(), "--seed", "12"]);
    assert!(base.status.success());
    assert_eq!(stdout(&base), stdout(&same), "config seed is 11");
    assert_ne!(stdout(&base), stdout(&other));
}

#[test]
fn test_validate_accepts_and_rejects() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), SMALL_CONFIG);
    let out = oms(&["validate", "--config", good.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("configuration ok"), "{}", stdout(&out));

    // A non-simplex fixed target cannot pair with any horizon.
    let bad = dir.path().join("bad.toml");
    fs::write(
        &bad,
        r#"
horizons = [100]
[scenario]
family = "neyman_allocation"
[[policies]]
type = "fixed"
target = [0.9, 0.9]
"#,
    )
    .unwrap();
    let out = oms(&["validate", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr(&out));
}

#[test]
fn test_validate_budget_policy_needs_budget() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"
horizons = [100]
[scenario]
family = "neyman_allocation"
[[policies]]
type = "etc_cs"
"#,
    );
    let out = oms(&["validate", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn test_replay_bootstraps_csv_sources() {
    let dir = tempfile::tempdir().unwrap();
    // Treated outcomes near 2, control outcomes near 1: the mean difference
    // the replayed estimator should recover is about 1.
    let mut y1 = String::from("Y1\n");
    let mut y0 = String::from("Y0,extra\n");
    for i in 0..400 {
        let jitter = (i % 7) as f64 * 0.01;
        y1.push_str(&format!("{}\n", 2.0 + jitter));
        y0.push_str(&format!("{},9\n", 1.0 - jitter));
    }
    let y1_path = dir.path().join("treated.csv");
    let y0_path = dir.path().join("control.csv");
    fs::write(&y1_path, y1).unwrap();
    fs::write(&y0_path, y0).unwrap();

    let config = write_config(
        dir.path(),
        r#"
num_runs = 3
horizons = [300]
[scenario]
family = "neyman_allocation"
[[policies]]
type = "fixed"
target = [0.5, 0.5]
"#,
    );
    let out = oms(&[
        "replay",
        "--config",
        config.to_str().unwrap(),
        "--data",
        y1_path.to_str().unwrap(),
        y0_path.to_str().unwrap(),
        "--true-beta",
        "1.03",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("policy=fixed"), "{text}");
    // With beta* supplied, the MSE against it is computable and small.
    let mse_field = text
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix("mse="))
        .expect("mse field in summary line");
    let mse: f64 = mse_field.parse().unwrap();
    assert!(mse.is_finite() && mse < 0.1, "mse = {mse}");
}

#[test]
fn test_replay_missing_column_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "wrong_name\n1.0\n").unwrap();
    let ok = dir.path().join("ok.csv");
    fs::write(&ok, "Y0\n1.0\n").unwrap();
    let config = write_config(
        dir.path(),
        r#"
num_runs = 2
horizons = [50]
[scenario]
family = "neyman_allocation"
[[policies]]
type = "fixed"
target = [0.5, 0.5]
"#,
    );
    let out = oms(&[
        "replay",
        "--config",
        config.to_str().unwrap(),
        "--data",
        bad.to_str().unwrap(),
        ok.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("Y1"), "{}", stderr(&out));
}

#[test]
fn test_missing_config_file_exits_two() {
    let out = oms(&["run", "--config", "/nonexistent/config.toml"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
}

#[test]
fn test_unknown_flag_exits_two() {
    let out = oms(&["run", "--config", "x.toml", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn test_help_lists_subcommands() {
    let out = oms(&["--help"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for sub in ["run", "oracle", "replay", "validate"] {
        assert!(text.contains(sub), "missing `{sub}` in help:\n{text}");
    }
}
