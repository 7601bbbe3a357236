//! End-to-end tests driving the built binary: exit codes, JSON record
//! shapes, config precedence, and the stdin monitor protocol.

use std::io::Write;
use std::process::{Command, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_singularguard"))
}

fn parse_line(stdout: &[u8]) -> serde_json::Value {
    let text = String::from_utf8_lossy(stdout);
    let line = text.lines().next().expect("one record line");
    serde_json::from_str(line).expect("valid JSON record")
}

#[test]
fn solve_ik_demo_target_succeeds() {
    let out = bin().args(["solve-ik", "--target", "0.2,-0.2,1.2", "--json"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rec = parse_line(&out.stdout);
    assert_eq!(rec["q"].as_array().unwrap().len(), 6);
    assert!(rec["mu"].as_f64().unwrap() >= 0.05);
    assert!(rec["kappa"].as_f64().unwrap() <= 50.0);
    assert!(rec["sigma_min"].as_f64().unwrap() >= 0.01);
    assert!(rec["residual"].as_f64().unwrap() <= 1e-3);
}

#[test]
fn solve_ik_unreachable_target_exits_one_with_structured_null() {
    let out = bin().args(["solve-ik", "--target", "9,9,9", "--json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let rec = parse_line(&out.stdout);
    assert!(rec["solution"].is_null());
    assert_eq!(rec["failure"], "unreachable");
}

#[test]
fn assess_critical_metrics_reports_emergency_stop() {
    let out = bin()
        .args(["assess", "--mu", "0.004", "--kappa", "600", "--qdot", "0,0,0,0,0,0", "--json"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let rec = parse_line(&out.stdout);
    assert_eq!(rec["safety_level"], "emergency_stop");
    assert_eq!(rec["action"], "EMERGENCY_STOP");
    assert!(rec["safety_score"].as_f64().unwrap() < 20.0);
}

#[test]
fn unknown_subcommand_exits_two() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_target_exits_two() {
    let out = bin().args(["solve-ik", "--target", "1,2"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["solve-ik", "--target", "a,b,c"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("app.toml");
    std::fs::write(&path, "unknown_key = true\n").unwrap();
    let out = bin()
        .args(["--config", path.to_str().unwrap(), "assess", "--mu", "0.1", "--kappa", "5"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_env_var_is_honored_and_flag_wins() {
    let dir = tempfile::tempdir().unwrap();
    // The env-var config narrows the warning tier so mu = 0.03 becomes
    // merely WARNING instead of the default CRITICAL_WARNING boundary.
    let env_cfg = dir.path().join("env.toml");
    std::fs::write(&env_cfg, "[monitor.tiers]\nmu_critical = 0.02\n").unwrap();
    let flag_cfg = dir.path().join("flag.toml");
    std::fs::write(&flag_cfg, "[monitor.tiers]\nmu_critical = 0.04\n").unwrap();

    let out = bin()
        .env("SINGULARGUARD_CONFIG", env_cfg.to_str().unwrap())
        .args(["assess", "--mu", "0.03", "--kappa", "5", "--json"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(parse_line(&out.stdout)["action"], "WARNING");

    let out = bin()
        .env("SINGULARGUARD_CONFIG", env_cfg.to_str().unwrap())
        .args([
            "--config",
            flag_cfg.to_str().unwrap(),
            "assess",
            "--mu",
            "0.03",
            "--kappa",
            "5",
            "--json",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(parse_line(&out.stdout)["action"], "CRITICAL_WARNING");
}

#[test]
fn monitor_requires_an_endpoint() {
    let out = bin().arg("monitor").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn monitor_stdin_round_trip() {
    let mut child = bin()
        .args(["monitor", "--stdin"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    writeln!(stdin, r#"{{"q":[0.1,-1.2,1.0,-1.0,-1.3,0.2],"qdot":[0,0,0,0,0,0]}}"#).unwrap();
    writeln!(stdin, "not json").unwrap();
    writeln!(stdin, r#"{{"q":[0,0,0,0,0,0],"qdot":[0,0,0,0,0,0]}}"#).unwrap();
    drop(stdin);
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<serde_json::Value> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3, "one response per request line");
    assert_eq!(lines[0]["safety_level"], "optimal");
    assert!(lines[1]["error"].is_string(), "malformed line yields an error record");
    assert_eq!(lines[2]["action"], "EMERGENCY_STOP", "zero pose is singular");
}

#[test]
fn workspace_scan_writes_schema_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("scan.csv");
    let out = bin()
        .args(["workspace-scan", "--samples", "64", "--out", csv.to_str().unwrap(), "--json"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rec = parse_line(&out.stdout);
    assert_eq!(rec["samples"], 64);
    assert_eq!(rec["zero_pose_action"], "EMERGENCY_STOP");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("# schema: singularguard-scan v1\n"));
    // schema + header + probe row + 64 samples
    assert_eq!(text.lines().count(), 67);
}

#[test]
fn train_then_eval_round_trip_through_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("app.toml");
    // Tiny network and short run keep this end-to-end test fast.
    std::fs::write(&cfg, "[rl.train]\nhidden = 16\n").unwrap();
    let out_dir = dir.path().join("artifacts");
    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "train",
            "--episodes",
            "16",
            "--seed",
            "5",
            "--out",
            out_dir.to_str().unwrap(),
            "--json",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rec = parse_line(&out.stdout);
    assert_eq!(rec["trained"], true);
    assert_eq!(rec["episodes"], 16);
    assert_eq!(rec["updates"], 2);

    let curves = std::fs::read_to_string(out_dir.join("curves.csv")).unwrap();
    assert!(curves.starts_with("# schema: singularguard-curves v1\n"));
    assert_eq!(curves.lines().count(), 2 + 2, "schema + header + one row per update");

    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "eval",
            "--params",
            out_dir.join("params.txt").to_str().unwrap(),
            "--episodes",
            "4",
            "--stage",
            "1",
            "--seed",
            "11",
            "--json",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rec = parse_line(&out.stdout);
    assert_eq!(rec["episodes"], 4);
    assert!(rec["min_mu"].as_f64().unwrap() > 0.0);
}

#[test]
fn eval_with_missing_params_exits_two() {
    let out = bin().args(["eval", "--params", "/no/such/params.txt"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
