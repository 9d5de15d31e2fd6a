use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn migratenet(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_migratenet"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("MIGRATENET_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_scenario_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = migratenet(&["run", "missing.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("E_INVALID_SCENARIO"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = migratenet(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_scenario_lists_every_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(
        &path,
        r#"{"version": 1, "name": "bad", "topology": {"kind": "mesh", "nodes": 2},
            "processes": [{"home": 5}],
            "migrations": [{"time": 0.0, "process": 3, "node": 1}]}"#,
    )
    .unwrap();
    let o = migratenet(&["run", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("processes[0].home"), "{err}");
    assert!(err.contains("migrations[0].process"), "{err}");
}

#[test]
fn scenario_runs_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ok.json");
    fs::write(
        &path,
        r#"{"version": 1, "name": "pair", "seed": 4,
            "topology": {"kind": "mesh", "nodes": 4},
            "processes": [{"home": 0, "node": 2}, {"home": 1, "node": 3}],
            "traffic": [{"time": 0.0, "transport": "relay", "src": 0, "dst": 1, "sizes": [1000]}],
            "assertions": [{"check": "all_delivered"},
                           {"check": "relayed_bytes", "node": 0, "equals": 1000}]}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = migratenet(&["run", path.to_str().unwrap(), "--trace"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    for f in [
        "pair.summary.txt",
        "pair.latency.csv",
        "pair.metrics.csv",
        "pair.trace.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let trace = fs::read_to_string(out.join("pair.trace.csv")).unwrap();
    assert!(trace.starts_with("time,kind,src,dst,from_node,to_node,size\n"));
}

#[test]
fn failed_assertion_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("strict.json");
    fs::write(
        &path,
        r#"{"version": 1, "name": "strict",
            "topology": {"kind": "mesh", "nodes": 4},
            "processes": [{"home": 0, "node": 2}, {"home": 1, "node": 3}],
            "traffic": [{"time": 0.0, "transport": "relay", "src": 0, "dst": 1, "sizes": [1000]}],
            "assertions": [{"check": "relayed_bytes", "node": 0, "equals": 0}]}"#,
    )
    .unwrap();
    let o = migratenet(&["run", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("[FAIL] relayed_bytes_n0"));
}

#[test]
fn sweep_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = migratenet(&["sweep", "--seed", "7"], out);
        assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    }
    for f in ["sweep.latency.csv", "sweep.summary.txt"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn limit_reports_the_cap_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let o = migratenet(&["limit"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("[PASS] direct_max_twice_relay"));
}

#[test]
fn ring_and_imbalance_pass() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        migratenet(&["ring", "--k", "5"], dir.path()).status.code(),
        Some(0)
    );
    assert_eq!(
        migratenet(&["imbalance"], dir.path()).status.code(),
        Some(0)
    );
    let metrics = fs::read_to_string(dir.path().join("ring.metrics.csv")).unwrap();
    assert!(metrics.contains("ring/direct_cold,"));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_migratenet"))
        .args(["gossip-stats", "--nodes", "8", "--trials", "5", "--out"])
        .arg(dir.path())
        .env("MIGRATENET_SEED", "9")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("seed: 9"));
    assert!(dir.path().join("gossip.gossip.csv").exists());
}

#[test]
fn bad_defaults_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("defaults.json");
    fs::write(&path, "{\"version\": 99}").unwrap();
    let o = migratenet(&["limit", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn calibrate_writes_the_shipped_defaults_and_reports_the_gap() {
    let dir = tempfile::tempdir().unwrap();
    let o = migratenet(&["calibrate"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stderr(&o).contains("E_NO_SOLUTION"));
    let written = fs::read_to_string(dir.path().join("defaults.json")).unwrap();
    let shipped = include_str!("../../core/defaults.json");
    assert_eq!(written, shipped);
    let o = migratenet(
        &[
            "limit",
            "--config",
            dir.path().join("defaults.json").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
}
