use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pmemsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmemsim")).args(args).output().unwrap()
}

fn run_e6(out: &Path) -> String {
    let o = pmemsim(&["run", "--experiment", "E6", "--seed", "7", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    fs::read_to_string(out.join("e6_xpbuffer_infer.csv")).unwrap()
}

#[test]
fn same_seed_same_csv() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_e6(&dir.path().join("a"));
    let b = run_e6(&dir.path().join("b"));
    assert_eq!(a, b);
    assert!(a.lines().count() > 1);
}

#[test]
fn bad_interleave_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = pmemsim(&["run", "--override", "topology.interleave_bytes=3000", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("interleave_bytes") && err.contains("power of two"), "{err}");
}

#[test]
fn all_writes_every_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = pmemsim(&["run", "--experiment", "all", "--override", "run.ops_per_point=500", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csvs = fs::read_dir(out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| {
            let n = e.file_name().into_string().unwrap();
            n.starts_with('e') && n.ends_with(".csv")
        })
        .count();
    assert_eq!(csvs, 9);
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 10);
    assert!(out.join("findings.csv").exists());
}

#[test]
fn config_echo_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let o = pmemsim(&["run", "--override", "workload.ops_per_thread=200", "--out", first.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let echo = first.join("config.ini");
    let second = dir.path().join("second");
    let o = pmemsim(&["run", "--config", echo.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&echo).unwrap(), fs::read_to_string(second.join("config.ini")).unwrap());
    assert_eq!(fs::read_to_string(first.join("workload.csv")).unwrap(), fs::read_to_string(second.join("workload.csv")).unwrap());
}

#[test]
fn dump_defaults_lists_keys() {
    let o = pmemsim(&["dump-config-defaults"]);
    assert!(o.status.success());
    let s = String::from_utf8_lossy(&o.stdout);
    assert!(s.contains("interleave_bytes"));
}
