//! End-to-end tests of the command-line driver.

use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nlheat"))
}

fn write_spec(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn build_writes_table_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "zero.json", r#"{"family":"zero","d":1,"beta":1.0}"#);
    let out = dir.path().join("run");
    let st = bin()
        .args(["build", "--coef", &spec, "--t", "0.5", "--out"])
        .arg(&out)
        .arg("--csv")
        .status()
        .unwrap();
    assert!(st.success());
    let table = fs::read(out.join("table.nlhk")).unwrap();
    assert_eq!(&table[..4], b"NLHK");
    let log: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("build_log.json")).unwrap()).unwrap();
    assert_eq!(log["command"], "build");
    assert!(log["coef_hash"].as_str().unwrap().len() == 64);
    assert!(log["residuals"]["duhamel_first"].as_f64().unwrap() < 1e-9);
    assert_eq!(log["positivity"]["verdict"], true);
    let csv = fs::read_to_string(out.join("table.csv")).unwrap();
    assert!(csv.starts_with("t,u,q\n"));
}

#[test]
fn malformed_spec_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "bad.json", r#"{"family":"zero","d":1,"beta":2.5}"#);
    let st = bin()
        .args(["build", "--coef", &spec, "--out"])
        .arg(dir.path().join("run"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
    // missing file is also a config error
    let st = bin()
        .args(["build", "--coef", "/nonexistent.json", "--out"])
        .arg(dir.path().join("run"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn bad_grid_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "zero.json", r#"{"family":"zero","d":1,"beta":1.0}"#);
    let st = bin()
        .args(["build", "--coef", &spec, "--grid", "12,0.05", "--out"])
        .arg(dir.path().join("run"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn check_zero_coefficient_passes_and_filters() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "zero.json", r#"{"family":"zero","d":1,"beta":1.0}"#);
    let out = dir.path().join("run");
    let res = bin()
        .args(["check", "--coef", &spec, "--t", "0.25", "--only", "mass", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1);
    let rep: serde_json::Value = serde_json::from_str(stdout.lines().next().unwrap()).unwrap();
    assert_eq!(rep["check_id"], "mass-conservation");
    assert_eq!(rep["verdict"], true);
    // the same line was persisted for `report`
    let st = bin().args(["report", "--out"]).arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(0));
    // unknown filter is a config error
    let st = bin()
        .args(["check", "--coef", &spec, "--only", "no-such-check", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn oracle_writes_reference_densities() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        "c.json",
        r#"{"family":"constant","params":{"c":0.15},"d":1,"beta":1.0}"#,
    );
    let out = dir.path().join("run");
    let st = bin()
        .args(["oracle", "--coef", &spec, "--t", "0.25", "--grid", "6,0.1,1.0", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());
    let csv = fs::read_to_string(out.join("oracle.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,r,p"));
    // all densities positive and finite
    for line in lines {
        let p: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(p.is_finite() && p > 0.0, "{line}");
    }
}

#[test]
fn simulate_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        "ball.json",
        r#"{"family":"indicator","params":{"m":1.0,"lambda":1.0},"d":1,"beta":1.0}"#,
    );
    let run = |out: &Path| {
        let st = bin()
            .args([
                "simulate", "--coef", &spec, "--t", "0.05", "--paths", "300", "--seed", "9",
                "--out",
            ])
            .arg(out)
            .status()
            .unwrap();
        assert!(st.success());
        (
            fs::read_to_string(out.join("sim_stats.json")).unwrap(),
            fs::read_to_string(out.join("jumps.csv")).unwrap(),
        )
    };
    let (s1, j1) = run(&dir.path().join("a"));
    let (s2, j2) = run(&dir.path().join("b"));
    assert_eq!(s1, s2);
    assert_eq!(j1, j2);
    let stats: serde_json::Value = serde_json::from_str(&s1).unwrap();
    assert!((stats["jump_rate"].as_f64().unwrap() - 38.0).abs() < 1e-9);
}
