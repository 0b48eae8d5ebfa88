use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn chameleon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chameleon"))
        .args(args)
        .output()
        .expect("spawn chameleon")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn chsh_run_from_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = chameleon(&[
        "run", "--mode", "chsh", "--seed", "42", "--n", "40000",
        "--angles", "0,1.5707963,0.7853982,2.3561945", "--out", path(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&out);
    let s = report["chsh"]["statistic"].as_f64().unwrap();
    assert!((s - 2.0 * std::f64::consts::SQRT_2).abs() < 0.1, "{s}");
    assert_eq!(report["correlations"].as_array().unwrap().len(), 4);
    for f in ["manifest.json", "config.json", "station1.records", "station2.records", "report.json", "report.csv", "plot.csv"] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    assert_eq!(fs::read(out_dir.join("report.json")).unwrap(), out.stdout);
    let csv = fs::read_to_string(out_dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("correlation,")).count(), 4);
    assert_eq!(csv.lines().filter(|l| l.starts_with("chsh,")).count(), 1);
}

#[test]
fn analyze_reproduces_report() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let run = chameleon(&["run", "--mode", "ekert", "--seed", "0x10", "--n", "5000",
        "--angles", "0,pi/4,pi/2", "--choice-seeds", "3,4", "--out", path(&run_dir)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let first = chameleon(&["analyze", "--in", path(&run_dir)]);
    let second = chameleon(&["analyze", "--in", path(&run_dir)]);
    assert!(first.status.success());
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(first.stdout, fs::read(run_dir.join("report.json")).unwrap());
    let csv_file = dir.path().join("r.csv");
    let csv = chameleon(&["analyze", "--in", path(&run_dir), "--format", "csv", "--out", path(&csv_file)]);
    assert!(csv.status.success());
    assert_eq!(fs::read(&csv_file).unwrap(), fs::read(run_dir.join("report.csv")).unwrap());
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"seed": "0x2a", "n": 2000, "mode": {"kind": "single", "a": 0, "b": "pi/3"}, "output_dir": "unused"}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("o");
    let out = chameleon(&["run", "--config", path(&cfg), "--n", "1000", "--angles", "0,pi/2", "--out", path(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&out);
    assert_eq!(report["n"], 1000);
    assert_eq!(report["seed"], 42);
    assert_eq!(report["correlations"][0]["b"], std::f64::consts::FRAC_PI_2);
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = chameleon(&["run", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"seed": 1, "n": "many", "mode": {"kind": "single", "a": 0, "b": 0}, "output_dir": "x"}"#).unwrap();
    let out = chameleon(&["run", "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`n`"));

    let out = chameleon(&["run", "--mode", "ekert", "--seed", "1", "--n", "10", "--angles", "0,1",
        "--choice-seeds", "5,5", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));

    let out = chameleon(&["station", "--role", "1", "--seed", "1", "--n", "4", "--policy", "schedule:0..2=0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = chameleon(&["analyze", "--in", path(&dir.path().join("missing"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_passes() {
    let out = chameleon(&["verify", "--grid", "16", "--tol", "1e-8"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("correlation          256/256 passed"));
    assert!(!text.contains("FAIL"));

    let out = chameleon(&["verify", "--grid", "3", "--cov-grid", "2", "--format", "json"]);
    assert!(out.status.success());
    let rows = json(&out);
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 4 * 9 + 4);
    for key in ["a", "b", "value", "tol", "method"] {
        assert!(rows[0].get(key).is_some(), "{key}");
    }
}

#[test]
fn offline_station_matches_coordinated_records() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let run = chameleon(&["run", "--mode", "single", "--seed", "99", "--n", "300", "--angles", "pi/4,1", "--out", path(&run_dir)]);
    assert!(run.status.success());
    let s1 = chameleon(&["station", "--role", "1", "--seed", "99", "--n", "300", "--policy", "fixed:pi/4"]);
    assert!(s1.status.success());
    assert_eq!(s1.stdout, fs::read(run_dir.join("station1.records")).unwrap());
    let file = dir.path().join("s2.records");
    let s2 = chameleon(&["station", "--role", "2", "--seed", "99", "--n", "300", "--policy", "fixed:1", "--out", path(&file)]);
    assert!(s2.status.success());
    assert_eq!(fs::read(&file).unwrap(), fs::read(run_dir.join("station2.records")).unwrap());
}

#[test]
fn coordinate_with_station_processes() {
    let dir = tempfile::tempdir().unwrap();
    let addr = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().to_string()
    };
    let cfg = dir.path().join("tcp.json");
    let out_dir = dir.path().join("run");
    fs::write(
        &cfg,
        format!(
            r#"{{"seed": 5, "n": 6000, "mode": {{"kind": "chsh", "a": 0, "a_prime": "pi/2", "b": "pi/4", "b_prime": "3pi/4"}},
               "transport": {{"kind": "tcp", "listen": "{addr}", "timeout_ms": 20000}}, "output_dir": "{}"}}"#,
            path(&out_dir)
        ),
    )
    .unwrap();
    let coord = Command::new(env!("CARGO_BIN_EXE_chameleon"))
        .args(["coordinate", "--config", path(&cfg)])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let stations: Vec<_> = ["2", "1"]
        .into_iter()
        .map(|role| {
            Command::new(env!("CARGO_BIN_EXE_chameleon"))
                .args(["station", "--role", role, "--connect", &addr, "--timeout-ms", "20000"])
                .stdout(Stdio::piped())
                .stderr(Stdio::piped())
                .spawn()
                .unwrap()
        })
        .collect();
    let coord = coord.wait_with_output().unwrap();
    assert!(coord.status.success(), "{}", String::from_utf8_lossy(&coord.stderr));
    for (role, s) in ["2", "1"].into_iter().zip(stations) {
        let s = s.wait_with_output().unwrap();
        assert!(s.status.success(), "{}", String::from_utf8_lossy(&s.stderr));
        let persisted = fs::read(out_dir.join(format!("station{role}.records"))).unwrap();
        assert_eq!(s.stdout, persisted);
    }
    let report = json(&coord);
    assert!(report["chsh"]["statistic"].as_f64().unwrap() > 2.0);

    let local_dir = dir.path().join("local");
    let local = chameleon(&["run", "--config", path(&cfg), "--out", path(&local_dir)]);
    assert!(local.status.success(), "{}", String::from_utf8_lossy(&local.stderr));
    assert_eq!(local.stdout, coord.stdout);
}

#[test]
fn coordinate_times_out_without_stations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"seed": 1, "n": 10, "mode": {"kind": "single", "a": 0, "b": 0}, "output_dir": "x"}"#).unwrap();
    let out_dir = dir.path().join("run");
    let out = chameleon(&["coordinate", "--config", path(&cfg), "--listen", "127.0.0.1:0",
        "--timeout-ms", "200", "--out", path(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("timeout"));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["complete"], false);

    let out = chameleon(&["coordinate", "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
}
