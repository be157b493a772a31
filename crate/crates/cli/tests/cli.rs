use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.toml"))
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wormflow")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn header(trace: &Path) -> Vec<String> {
    let text = fs::read_to_string(trace).unwrap();
    text.lines().next().unwrap().split(',').map(String::from).collect()
}

#[test]
fn unknown_key_is_a_config_error_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(config("fig5a")).unwrap().replace("capacity = 0.01", "capacty = 0.01");
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, text).unwrap();
    let out = run(&["run-oob", "--config", s(&bad), "--out", s(&dir.path().join("o")), "--no-plots"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line"), "{err}");
    assert!(err.contains("capacty"), "{err}");
}

#[test]
fn oracle_splits_identical_paths_evenly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("twin.toml");
    fs::write(
        &cfg,
        r#"
name = "twin"
[network]
nodes = ["S", "A", "B", "D"]
[[network.links]]
id = 1
from = "S"
to = "A"
kind = "valid"
capacity = 3.5
propagation_delay = 1.0
queue_capacity = 5
[[network.links]]
id = 2
from = "A"
to = "D"
kind = "valid"
capacity = 3.5
propagation_delay = 1.0
queue_capacity = 5
[[network.links]]
id = 3
from = "S"
to = "B"
kind = "valid"
capacity = 3.5
propagation_delay = 1.0
queue_capacity = 5
[[network.links]]
id = 4
from = "B"
to = "D"
kind = "valid"
capacity = 3.5
propagation_delay = 1.0
queue_capacity = 5
[[sources]]
id = 1
origin = "S"
destination = "D"
rate = 6.0
paths = [[1, 2], [3, 4]]
initial = [5.0, 1.0]
[sim]
dt = 0.01
horizon = 1.0
seed = 1
"#,
    )
    .unwrap();
    let out_dir = dir.path().join("o");
    let out = run(&["oracle", "--config", s(&cfg), "--out", s(&out_dir), "--no-plots"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let a = head.iter().position(|h| *h == "r_s1_p1").unwrap();
    let b = head.iter().position(|h| *h == "r_s1_p2").unwrap();
    assert!((row[a] - 3.0).abs() < 1e-6 && (row[b] - 3.0).abs() < 1e-6, "{} {}", row[a], row[b]);
}

#[test]
fn trace_columns_follow_the_layout() {
    let dir = tempfile::tempdir().unwrap();
    let o1 = dir.path().join("net");
    let out = run(&["run-oob", "--config", s(&config("fig5b")), "--out", s(&o1), "--horizon", "1", "--no-plots"]);
    assert!(out.status.success());
    let h = header(&o1.join("trace.csv"));
    assert_eq!(h.iter().filter(|c| c.starts_with("r_s")).count(), 6);
    assert_eq!(h.iter().filter(|c| c.starts_with("q_s")).count(), 6);
    assert!(!h.iter().any(|c| c == "x_plant"));

    let o2 = dir.path().join("plant");
    let out = run(&["run-plant", "--config", s(&config("fig7a")), "--out", s(&o2), "--horizon", "1", "--no-plots"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let hp = header(&o2.join("trace.csv"));
    assert_eq!(&hp[hp.len() - 4..], ["x_plant", "u", "tau", "dropped"]);
}

#[test]
fn zero_horizon_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["run-oob", "--config", s(&config("fig5b")), "--out", s(dir.path()), "--horizon", "0", "--no-plots"]);
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut traces = Vec::new();
    for k in 0..2 {
        let o = dir.path().join(format!("r{k}"));
        let out = run(&["run-ib", "--config", s(&config("fig6b")), "--out", s(&o), "--horizon", "2", "--no-plots"]);
        assert!(out.status.success());
        traces.push(fs::read(o.join("trace.csv")).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn wrong_adversary_kind_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["run-oob", "--config", s(&config("fig6b")), "--out", s(dir.path()), "--no-plots"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn audit_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let out = run(&["run-oob", "--config", s(&config("fig5b")), "--out", s(&run_dir), "--horizon", "5", "--no-plots"]);
    assert!(out.status.success());
    let trace = run_dir.join("trace.csv");

    let ok_dir = dir.path().join("ok");
    let out = run(&["audit", "--config", s(&config("fig5b")), "--trace", s(&trace), "--out", s(&ok_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ok_dir.join("audit.csv").exists());

    // A trace from a different network cannot be audited against this one.
    let bad_dir = dir.path().join("bad");
    let out = run(&["audit", "--config", s(&config("ib_beta")), "--trace", s(&trace), "--out", s(&bad_dir)]);
    assert_eq!(out.status.code(), Some(3));

    let out = run(&["audit", "--config", s(&config("fig5b")), "--trace", s(&dir.path().join("missing.csv")), "--out", s(&bad_dir)]);
    assert_eq!(out.status.code(), Some(2));
}
